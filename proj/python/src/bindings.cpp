#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <json.hpp>

#include "lami/bench.hpp"
#include "lami/errors.hpp"

namespace py = pybind11;
using namespace lami;
using nlohmann::json;

namespace {

Attributes attrs_from(const py::dict& d) {
  Attributes a;
  for (auto kind : {AttrKind::color, AttrKind::shape, AttrKind::size}) {
    const auto key = std::string(attr_kind_name(kind));
    if (!d.contains(key.c_str())) throw ArgumentError("missing attribute '" + key + "'");
    const auto word = d[key.c_str()].cast<std::string>();
    const auto v = attr_value_of(kind, word);
    if (!v) throw ArgumentError("unknown " + key + " '" + word + "'");
    a.set(kind, *v);
  }
  return a;
}

py::dict attrs_dict(const Attributes& a) {
  py::dict d;
  for (auto kind : {AttrKind::color, AttrKind::shape, AttrKind::size})
    d[py::str(std::string(attr_kind_name(kind)))] = std::string(attr_value_name(kind, a.get(kind)));
  return d;
}

py::array_t<double> pixels(const ImageSample& img) {
  py::array_t<double> out({kImageSide, kImageSide, kImageChannels});
  std::copy(img.pixels.begin(), img.pixels.end(), out.mutable_data());
  return out;
}

RunConfig config_from(const std::string& text) { return run_config_from_json(json::parse(text)); }

py::dict row_dict(const ResultRow& r) {
  py::dict d;
  d["task"] = r.task;
  d["method"] = r.method;
  d["k"] = r.k;
  d["epsilon"] = r.epsilon;
  d["seed"] = r.seed;
  d["accuracy"] = r.accuracy();
  d["correct"] = r.correct;
  d["count"] = r.count;
  d["ms"] = r.ms;
  return d;
}

class PyPipeline {
 public:
  PyPipeline(const std::string& config, std::uint64_t seed, const std::vector<std::string>& placements,
             const std::string& cache_dir)
      : config_(config_from(config)) {
    std::vector<Placement> pls;
    for (const auto& p : placements) pls.push_back(parse_placement(p));
    py::gil_scoped_release release;
    pipeline_ = build_pipeline(config_, seed, pls, cache_dir);
  }

  std::string infer(const std::string& prompt, std::size_t k, const std::string& strategy, double epsilon,
                    const std::string& alignment, std::uint64_t seed, const std::string& placement) const {
    InferenceConfig cfg;
    cfg.k = k;
    cfg.strategy = parse_strategy(strategy);
    cfg.epsilon = epsilon;
    cfg.alignment = parse_alignment_mode(alignment);
    cfg.seed = seed;
    const auto bundle = lami::infer(prompt, cfg, pipeline_.models(parse_placement(placement)));
    return bundle_json(bundle, pipeline_.lm.vocab);
  }

  py::dict evaluate(const std::string& task, std::size_t k, const std::string& strategy, double epsilon,
                    const std::string& alignment, std::uint64_t seed, const std::string& placement,
                    std::size_t threads) const {
    InferenceConfig cfg;
    cfg.k = k;
    cfg.strategy = parse_strategy(strategy);
    cfg.epsilon = epsilon;
    cfg.alignment = parse_alignment_mode(alignment);
    cfg.seed = seed;
    const auto items = make_qa(pipeline_.world, pipeline_.corpora.heldout, parse_qa_task(task));
    ResultRow r;
    {
      py::gil_scoped_release release;
      r = run_task(items, cfg, pipeline_.models(parse_placement(placement)), EvalOptions{threads, false, {}});
    }
    return row_dict(r);
  }

  std::vector<double> score(const std::string& prompt, const std::vector<std::string>& candidates) const {
    return score_candidates(prompt, candidates, pipeline_.lm);
  }

  std::vector<py::dict> objects() const {
    std::vector<py::dict> out;
    for (std::size_t i = 0; i < pipeline_.world.objects.size(); ++i) {
      py::dict d;
      d["name"] = pipeline_.world.objects[i].name;
      d["attrs"] = attrs_dict(pipeline_.world.objects[i].attrs);
      d["heldout"] = pipeline_.corpora.heldout.contains(i);
      out.push_back(d);
    }
    return out;
  }

  std::pair<double, double> calibration() const { return {pipeline_.calibration.s_lo, pipeline_.calibration.s_hi}; }
  std::uint64_t seed() const { return pipeline_.seed; }
  std::uint64_t lm_hash() const { return pipeline_.lm.hash(); }
  std::uint64_t vision_hash() const { return pipeline_.vision.hash(); }

  void save(const std::string& dir) const {
    std::filesystem::create_directories(dir);
    save_checkpoint(pipeline_.lm, dir + "/lm.ckpt");
    save_checkpoint(pipeline_.vision, dir + "/dual.ckpt");
    for (const auto& [pl, params] : pipeline_.fusion) save_checkpoint(params, dir + "/" + fusion_checkpoint_name(pl));
  }

 private:
  RunConfig config_;
  Pipeline pipeline_;
};

}  // namespace

PYBIND11_MODULE(_lami, m) {
  m.doc() = "Desk-scale imagination-augmented language model";

  // translators run newest first, so the base class goes first
  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<ArgumentError>(m, "ArgumentError", base.ptr());
  py::register_exception<DataError>(m, "DataError", base.ptr());
  py::register_exception<FormatError>(m, "FormatError", base.ptr());

  m.def("default_config", [] { return run_config_to_json(RunConfig{}).dump(); });
  m.def("normalize_config", [](const std::string& text) { return run_config_to_json(config_from(text)).dump(); },
        py::arg("config"));

  m.def(
      "world",
      [](std::uint64_t seed, std::size_t n) {
        const auto w = build_world(seed, n);
        std::vector<py::dict> out;
        for (const auto& o : w.objects) {
          py::dict d;
          d["name"] = o.name;
          d["attrs"] = attrs_dict(o.attrs);
          out.push_back(d);
        }
        return out;
      },
      py::arg("seed"), py::arg("objects") = 64);

  m.def(
      "render",
      [](const py::dict& attrs, std::uint64_t seed, double epsilon) {
        const auto img = render(attrs_from(attrs), seed, epsilon);
        return py::make_tuple(pixels(img), attrs_dict(img.meta));
      },
      py::arg("attrs"), py::arg("seed"), py::arg("epsilon") = 0.0);

  m.def("strategies", [] {
    std::vector<std::string> out;
    for (auto s : kStrategies) out.emplace_back(strategy_name(s));
    return out;
  });

  m.def(
      "aggregate",
      [](const std::vector<double>& p0, const std::vector<std::pair<std::vector<double>, double>>& images,
         const std::string& strategy, double tau) {
        PredictionBundle b;
        b.p0 = Distribution(p0);
        for (std::size_t i = 0; i < images.size(); ++i)
          b.images.push_back({i, Distribution(images[i].first), images[i].second, ImageSample{}});
        const auto p = aggregate(b, parse_strategy(strategy), tau);
        return std::vector<double>(p.probs().begin(), p.probs().end());
      },
      py::arg("p0"), py::arg("images"), py::arg("strategy") = "clip_fusion", py::arg("tau") = 1.0);

  m.def("rows_csv", [](const std::string& rows_json_text) { return rows_csv(rows_from_json(rows_json_text)); },
        py::arg("rows_json"));

  py::class_<PyPipeline>(m, "Pipeline")
      .def(py::init<const std::string&, std::uint64_t, const std::vector<std::string>&, const std::string&>(),
           py::arg("config"), py::arg("seed") = 0, py::arg("placements") = std::vector<std::string>{"late"},
           py::arg("cache_dir") = "")
      .def("infer", &PyPipeline::infer, py::arg("prompt"), py::arg("k") = 6, py::arg("strategy") = "clip_fusion",
           py::arg("epsilon") = 0.0, py::arg("alignment") = "learned", py::arg("seed") = 0,
           py::arg("placement") = "late")
      .def("evaluate", &PyPipeline::evaluate, py::arg("task"), py::arg("k") = 6, py::arg("strategy") = "clip_fusion",
           py::arg("epsilon") = 0.0, py::arg("alignment") = "learned", py::arg("seed") = 0,
           py::arg("placement") = "late", py::arg("threads") = 1)
      .def("score", &PyPipeline::score, py::arg("prompt"), py::arg("candidates"))
      .def("objects", &PyPipeline::objects)
      .def("save", &PyPipeline::save, py::arg("dir"))
      .def_property_readonly("calibration", &PyPipeline::calibration)
      .def_property_readonly("seed", &PyPipeline::seed)
      .def_property_readonly("lm_hash", &PyPipeline::lm_hash)
      .def_property_readonly("vision_hash", &PyPipeline::vision_hash);
}
