#include "lami/bench.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstring>
#include <exception>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include "lami/errors.hpp"

namespace lami {

using nlohmann::json;

namespace {

// ---- json helpers

void check_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError("'" + where + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError("unknown key '" + key + "' in " + (where.empty() ? "run config" : "'" + where + "'"));
  }
}

template <class T>
void read(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
  }
}

json lm_json(const LmConfig& c) {
  return {{"layers", c.layers}, {"heads", c.heads}, {"d_model", c.d_model}, {"context", c.context}};
}

json dual_json(const DualEncoderConfig& c) {
  return {{"d_v", c.d_v},     {"joint", c.joint}, {"temperature", c.temperature},
          {"steps", c.steps}, {"batch", c.batch}, {"lr", c.lr},
          {"weight_decay", c.weight_decay}, {"rerender", c.rerender}, {"object_free_share", c.object_free_share}};
}

void dual_from(const json& j, DualEncoderConfig& c, const std::string& where) {
  check_keys(j, where,
             {"d_v", "joint", "temperature", "steps", "batch", "lr", "weight_decay", "rerender", "object_free_share"});
  read(j, "d_v", c.d_v);
  read(j, "joint", c.joint);
  read(j, "temperature", c.temperature);
  read(j, "steps", c.steps);
  read(j, "batch", c.batch);
  read(j, "lr", c.lr);
  read(j, "weight_decay", c.weight_decay);
  read(j, "rerender", c.rerender);
  read(j, "object_free_share", c.object_free_share);
}

// ---- binary checkpoint io

static_assert(std::endian::native == std::endian::little, "checkpoint io assumes a little-endian host");

constexpr char kMagic[5] = {'L', 'A', 'M', 'I', '1'};

class Writer {
 public:
  template <class T>
  void put(T v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.append(p, sizeof(T));
  }
  void bytes(std::string_view s) { buf_.append(s); }
  void str(std::string_view s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    bytes(s);
  }
  const std::string& data() const { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(std::string data) : data_(std::move(data)) {}
  template <class T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string str(const char* what) { return bytes(get<std::uint32_t>(what), what); }
  std::size_t offset() const { return pos_; }
  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (data_.size() - pos_ < n) throw FormatError(pos_, std::string("truncated while reading ") + what);
  }
  std::string data_;
  std::size_t pos_ = 0;
};

void write_checkpoint(const std::string& path, ComponentTag tag, const json& meta, const NamedTensors& tensors) {
  Writer w;
  w.bytes(std::string_view(kMagic, sizeof(kMagic)));
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(tag));
  w.str(meta.dump());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    w.str(name);
    w.put<std::uint8_t>(0);  // f64
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.put<std::uint64_t>(d);
    for (double x : t.data()) w.put<double>(x);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path);
  out.write(w.data().data(), static_cast<std::streamsize>(w.data().size()));
  if (!out) throw DataError("failed writing checkpoint " + path);
}

struct RawCheckpoint {
  json meta;
  NamedTensors tensors;
};

RawCheckpoint read_checkpoint(const std::string& path, ComponentTag expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read checkpoint " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  Reader r(ss.str());
  if (r.bytes(sizeof(kMagic), "magic") != std::string_view(kMagic, sizeof(kMagic)))
    throw FormatError(0, "bad magic, not a LAMI1 checkpoint");
  const std::size_t version_at = r.offset();
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) throw FormatError(version_at, "unsupported version " + std::to_string(version));
  const std::size_t tag_at = r.offset();
  const auto tag = r.get<std::uint8_t>("component tag");
  if (tag > static_cast<std::uint8_t>(ComponentTag::fusion)) throw FormatError(tag_at, "unknown component tag");
  if (tag != static_cast<std::uint8_t>(expected)) {
    throw FormatError(tag_at, "component tag is '" + std::string(component_tag_name(static_cast<ComponentTag>(tag))) +
                                  "', expected '" + std::string(component_tag_name(expected)) + "'");
  }
  RawCheckpoint raw;
  const std::size_t meta_at = r.offset();
  try {
    raw.meta = json::parse(r.str("metadata"));
  } catch (const json::exception& e) {
    throw FormatError(meta_at, std::string("bad metadata: ") + e.what());
  }
  const auto count = r.get<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str("tensor name");
    const std::size_t dtype_at = r.offset();
    if (r.get<std::uint8_t>("dtype") != 0) throw FormatError(dtype_at, "tensor '" + name + "' is not f64");
    const auto rank = r.get<std::uint32_t>("rank");
    if (rank > 4) throw FormatError(r.offset() - 4, "tensor '" + name + "' has rank " + std::to_string(rank));
    Shape shape;
    std::size_t size = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>("shape")));
      size *= shape.back();
    }
    if (size > (std::size_t{1} << 28)) throw FormatError(r.offset(), "tensor '" + name + "' is implausibly large");
    std::vector<double> values(size);
    for (auto& v : values) v = r.get<double>("tensor payload");
    raw.tensors.emplace(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  if (!r.done()) throw FormatError(r.offset(), "trailing bytes after the last tensor");
  return raw;
}

Vocabulary vocab_from(const json& words) {
  std::vector<std::string> w = words.get<std::vector<std::string>>();
  return Vocabulary(w);
}

json vocab_json(const Vocabulary& v) {
  return std::vector<std::string>(v.words().begin() + 3, v.words().end());
}

template <class Fn>
auto meta_field(const std::string& path, Fn&& fn) {
  try {
    return fn();
  } catch (const json::exception& e) {
    throw FormatError(0, "bad metadata in " + path + ": " + e.what());
  }
}

// ---- misc

double since_ms(std::chrono::steady_clock::time_point t) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t).count();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string num(double x) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, r.ptr);
}

template <class Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t t = std::max<std::size_t>(1, std::min(threads, n));
  if (t == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < t; ++i) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

void check_items(std::span<const QaItem> items) {
  if (items.empty()) throw DataError("empty QA set");
  for (const auto& it : items) {
    if (it.candidates.empty()) throw DataError("QA item has no candidates: \"" + it.prompt + "\"");
    if (it.gold >= it.candidates.size()) throw DataError("gold index out of range: \"" + it.prompt + "\"");
  }
}

ResultRow make_row(std::span<const QaItem> items, const std::string& method, std::size_t k, double eps,
                   std::uint64_t seed, const std::vector<std::size_t>& predicted, double ms, bool timing) {
  ResultRow row;
  row.task = std::string(qa_task_name(items.front().task));
  row.method = method;
  row.k = k;
  row.epsilon = eps;
  row.seed = seed;
  row.count = items.size();
  for (std::size_t i = 0; i < items.size(); ++i) row.correct += predicted[i] == items[i].gold;
  row.ms = timing ? ms : 0.0;
  return row;
}

}  // namespace

// ---- configuration

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  check_keys(j, "",
             {"seed", "world", "epsilon", "lm", "lm_train", "dual", "fusion", "placement", "inference", "calibration",
              "tasks", "k_values", "seeds", "threads", "best_of_n_max_tokens", "output_dir", "report_timing"});
  read(j, "seed", c.seed);
  if (j.contains("world")) {
    const auto& w = j.at("world");
    check_keys(w, "world", {"seed", "objects", "heldout_fraction"});
    read(w, "seed", c.world.seed);
    read(w, "objects", c.world.objects);
    read(w, "heldout_fraction", c.world.heldout_fraction);
  }
  read(j, "epsilon", c.epsilon);
  if (j.contains("lm")) {
    const auto& l = j.at("lm");
    check_keys(l, "lm", {"layers", "heads", "d_model", "context"});
    read(l, "layers", c.lm.layers);
    read(l, "heads", c.lm.heads);
    read(l, "d_model", c.lm.d_model);
    read(l, "context", c.lm.context);
  }
  if (j.contains("lm_train")) {
    const auto& l = j.at("lm_train");
    check_keys(l, "lm_train", {"steps", "batch", "lr", "weight_decay", "validation_fraction"});
    read(l, "steps", c.lm_train.steps);
    read(l, "batch", c.lm_train.batch);
    read(l, "lr", c.lm_train.lr);
    read(l, "weight_decay", c.lm_train.weight_decay);
    read(l, "validation_fraction", c.lm_train.validation_fraction);
  }
  if (j.contains("dual")) dual_from(j.at("dual"), c.dual, "dual");
  if (j.contains("fusion")) {
    const auto& f = j.at("fusion");
    check_keys(f, "fusion", {"hidden", "stage1_steps", "stage1_lr", "stage2_steps", "stage2_lr", "batch", "weight_decay"});
    read(f, "hidden", c.fusion.hidden);
    read(f, "stage1_steps", c.fusion.stage1_steps);
    read(f, "stage1_lr", c.fusion.stage1_lr);
    read(f, "stage2_steps", c.fusion.stage2_steps);
    read(f, "stage2_lr", c.fusion.stage2_lr);
    read(f, "batch", c.fusion.batch);
    read(f, "weight_decay", c.fusion.weight_decay);
  }
  if (j.contains("placement")) c.placement = parse_placement(j.at("placement").get<std::string>());
  if (j.contains("inference")) {
    const auto& i = j.at("inference");
    check_keys(i, "inference", {"k", "strategy", "alignment", "tau"});
    read(i, "k", c.inference.k);
    if (i.contains("strategy")) c.inference.strategy = parse_strategy(i.at("strategy").get<std::string>());
    if (i.contains("alignment")) c.inference.alignment = parse_alignment_mode(i.at("alignment").get<std::string>());
    read(i, "tau", c.inference.tau);
  }
  if (j.contains("calibration") && !j.at("calibration").is_null()) {
    const auto& k = j.at("calibration");
    check_keys(k, "calibration", {"s_lo", "s_hi"});
    Calibration cal;
    read(k, "s_lo", cal.s_lo);
    read(k, "s_hi", cal.s_hi);
    if (!(cal.s_hi > cal.s_lo)) throw ConfigError("calibration needs s_hi > s_lo");
    c.calibration = cal;
  }
  if (j.contains("tasks")) {
    c.tasks.clear();
    for (const auto& t : j.at("tasks")) {
      try {
        c.tasks.push_back(parse_qa_task(t.get<std::string>()));
      } catch (const Error& e) {
        throw ConfigError(e.what());
      }
    }
  }
  read(j, "k_values", c.k_values);
  read(j, "seeds", c.seeds);
  read(j, "threads", c.threads);
  read(j, "best_of_n_max_tokens", c.best_of_n_max_tokens);
  read(j, "output_dir", c.output_dir);
  read(j, "report_timing", c.report_timing);
  if (c.seeds.empty()) throw ConfigError("at least one seed is required");
  if (c.threads == 0) throw ConfigError("threads must be at least 1");
  for (auto k : c.k_values)
    if (k == 0) throw ConfigError("k values must be at least 1");
  InferenceConfig probe = c.inference;
  probe.epsilon = c.epsilon;
  probe.validate();
  return c;
}

json run_config_to_json(const RunConfig& c) {
  json tasks = json::array();
  for (auto t : c.tasks) tasks.push_back(std::string(qa_task_name(t)));
  json j = {
      {"seed", c.seed},
      {"world", {{"seed", c.world.seed}, {"objects", c.world.objects}, {"heldout_fraction", c.world.heldout_fraction}}},
      {"epsilon", c.epsilon},
      {"lm", lm_json(c.lm)},
      {"lm_train",
       {{"steps", c.lm_train.steps},
        {"batch", c.lm_train.batch},
        {"lr", c.lm_train.lr},
        {"weight_decay", c.lm_train.weight_decay},
        {"validation_fraction", c.lm_train.validation_fraction}}},
      {"dual", dual_json(c.dual)},
      {"fusion",
       {{"hidden", c.fusion.hidden},
        {"stage1_steps", c.fusion.stage1_steps},
        {"stage1_lr", c.fusion.stage1_lr},
        {"stage2_steps", c.fusion.stage2_steps},
        {"stage2_lr", c.fusion.stage2_lr},
        {"batch", c.fusion.batch},
        {"weight_decay", c.fusion.weight_decay}}},
      {"placement", std::string(placement_name(c.placement))},
      {"inference",
       {{"k", c.inference.k},
        {"strategy", std::string(strategy_name(c.inference.strategy))},
        {"alignment", std::string(alignment_mode_name(c.inference.alignment))},
        {"tau", c.inference.tau}}},
      {"calibration", c.calibration ? json{{"s_lo", c.calibration->s_lo}, {"s_hi", c.calibration->s_hi}} : json()},
      {"tasks", tasks},
      {"k_values", c.k_values},
      {"seeds", c.seeds},
      {"threads", c.threads},
      {"best_of_n_max_tokens", c.best_of_n_max_tokens},
      {"output_dir", c.output_dir},
      {"report_timing", c.report_timing},
  };
  return j;
}

RunConfig load_run_config(const std::string& path) {
  const std::string text = read_text(path);
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError("cannot parse run config " + path + ": " + e.what());
  }
  return run_config_from_json(j);
}

void save_run_config(const RunConfig& config, const std::string& path) {
  write_text(path, run_config_to_json(config).dump(2) + "\n");
}

// ---- checkpoints

std::string_view component_tag_name(ComponentTag tag) {
  switch (tag) {
    case ComponentTag::lm: return "lm";
    case ComponentTag::dual: return "dual";
    default: return "fusion";
  }
}

void save_checkpoint(const LmCheckpoint& ckpt, const std::string& path) {
  json meta = {{"config", lm_json(ckpt.config)}, {"vocab", vocab_json(ckpt.vocab)}};
  meta["config"]["vocab_size"] = ckpt.config.vocab_size;
  write_checkpoint(path, ComponentTag::lm, meta, ckpt.params);
}

void save_checkpoint(const DualEncoderCheckpoint& ckpt, const std::string& path) {
  json meta = {{"config", dual_json(ckpt.config)}, {"vocab", vocab_json(ckpt.vocab)}};
  write_checkpoint(path, ComponentTag::dual, meta, ckpt.params);
}

void save_checkpoint(const FusionParams& params, const std::string& path) {
  json meta = {{"placement", std::string(placement_name(params.placement))}};
  write_checkpoint(path, ComponentTag::fusion, meta, params.params);
}

LmCheckpoint load_lm_checkpoint(const std::string& path) {
  auto raw = read_checkpoint(path, ComponentTag::lm);
  LmCheckpoint c;
  meta_field(path, [&] {
    const auto& cfg = raw.meta.at("config");
    c.config.layers = cfg.at("layers").get<std::size_t>();
    c.config.heads = cfg.at("heads").get<std::size_t>();
    c.config.d_model = cfg.at("d_model").get<std::size_t>();
    c.config.context = cfg.at("context").get<std::size_t>();
    c.config.vocab_size = cfg.at("vocab_size").get<std::size_t>();
    c.vocab = vocab_from(raw.meta.at("vocab"));
    return 0;
  });
  c.params = std::move(raw.tensors);
  return c;
}

DualEncoderCheckpoint load_dual_checkpoint(const std::string& path) {
  auto raw = read_checkpoint(path, ComponentTag::dual);
  DualEncoderCheckpoint c;
  meta_field(path, [&] {
    dual_from(raw.meta.at("config"), c.config, "config");
    c.vocab = vocab_from(raw.meta.at("vocab"));
    return 0;
  });
  c.params = std::move(raw.tensors);
  return c;
}

FusionParams load_fusion_checkpoint(const std::string& path) {
  auto raw = read_checkpoint(path, ComponentTag::fusion);
  FusionParams f;
  meta_field(path, [&] {
    f.placement = parse_placement(raw.meta.at("placement").get<std::string>());
    return 0;
  });
  f.params = std::move(raw.tensors);
  return f;
}

// ---- pipeline

Models Pipeline::models(Placement placement) const {
  const auto it = fusion.find(placement);
  if (it == fusion.end())
    throw ConfigError("no trained fusion model for placement '" + std::string(placement_name(placement)) + "'");
  return Models{&lm, &vision, &it->second, &world, calibration};
}

SeedPlan seed_plan(const RunConfig& config, std::uint64_t seed) {
  const std::uint64_t base = splitmix64(config.seed * 0x9e3779b97f4a7c15ULL + seed);
  return {config.world.seed + seed, splitmix64(base + 1), splitmix64(base + 2), splitmix64(base + 3),
          splitmix64(base + 4)};
}

CalibrationSplit calibration_split(const WorldSpec& world, const HeldoutFacts& heldout, std::uint64_t seed) {
  HeldoutFacts train;
  for (std::size_t o = 0; o < world.objects.size(); ++o)
    if (!heldout.contains(o)) train.objects.push_back(o);
  CalibrationSplit split;
  for (auto task : {QaTask::color, QaTask::shape}) {
    for (const auto& q : make_qa(world, train, task)) {
      split.texts.push_back(q.prompt);
      split.images.push_back(render(world.objects[q.objects.front()].attrs, seed + split.images.size(), 0.0));
    }
  }
  return split;
}

namespace {

// Training inputs of each component; a cached checkpoint is reused only when its stamp matches.
json lm_stamp(const RunConfig& c, const SeedPlan& plan) {
  const auto full = run_config_to_json(c);
  return {{"world", full["world"]}, {"world_seed", plan.world}, {"lm", full["lm"]}, {"lm_train", full["lm_train"]},
          {"seed", plan.lm}};
}

json dual_stamp(const RunConfig& c, const SeedPlan& plan) {
  const auto full = run_config_to_json(c);
  return {{"world", full["world"]}, {"world_seed", plan.world}, {"dual", full["dual"]}, {"seed", plan.dual}};
}

json fusion_stamp(const RunConfig& c, const SeedPlan& plan, Placement pl) {
  const auto full = run_config_to_json(c);
  return {{"lm", lm_stamp(c, plan)},           {"dual", dual_stamp(c, plan)}, {"fusion", full["fusion"]},
          {"placement", placement_name(pl)}, {"seed", plan.fusion}};
}

bool stamp_matches(const std::filesystem::path& ckpt, const json& stamp) {
  auto sp = ckpt;
  sp += ".stamp.json";
  if (!std::filesystem::exists(ckpt) || !std::filesystem::exists(sp)) return false;
  try {
    return json::parse(read_text(sp.string())) == stamp;
  } catch (const json::exception&) {
    return false;
  }
}

void write_stamp(const std::filesystem::path& ckpt, const json& stamp) {
  auto sp = ckpt;
  sp += ".stamp.json";
  write_text(sp.string(), stamp.dump(2) + "\n");
}

}  // namespace

std::string pipeline_dir(const std::string& output_dir, std::uint64_t seed) {
  return (std::filesystem::path(output_dir) / ("seed-" + std::to_string(seed))).string();
}

std::string fusion_checkpoint_name(Placement placement) {
  return "fusion-" + std::string(placement_name(placement)) + ".ckpt";
}

Pipeline build_pipeline(const RunConfig& config, std::uint64_t seed, std::span<const Placement> placements,
                        const std::string& cache_dir) {
  namespace fs = std::filesystem;
  const auto plan = seed_plan(config, seed);
  const bool cache = !cache_dir.empty();
  if (cache) fs::create_directories(cache_dir);
  const fs::path dir(cache_dir);
  Pipeline p;
  p.seed = seed;
  p.world = build_world(plan.world, config.world.objects);
  p.corpora = emit_corpora(p.world, config.world.heldout_fraction, plan.world);

  auto t0 = std::chrono::steady_clock::now();
  const auto vocab = Vocabulary::build(p.corpora.lm_corpus);
  const auto lm_path = dir / "lm.ckpt";
  const auto lm_st = lm_stamp(config, plan);
  if (cache && stamp_matches(lm_path, lm_st)) {
    p.lm = load_lm_checkpoint(lm_path.string());
    if (p.lm.vocab.words() != vocab.words()) throw DataError("cached lm vocabulary does not match the corpus");
  } else {
    std::vector<Tokens> corpus;
    corpus.reserve(p.corpora.lm_corpus.size());
    for (const auto& s : p.corpora.lm_corpus) corpus.push_back(tokenize(s, vocab));
    LmConfig lc = config.lm;
    lc.vocab_size = vocab.size();
    p.lm = train_lm(vocab, corpus, lc, config.lm_train, plan.lm, &p.lm_report);
    p.lm_trained = true;
    if (cache) {
      save_checkpoint(p.lm, lm_path.string());
      write_stamp(lm_path, lm_st);
    }
  }
  p.timings.lm_s = since_ms(t0) / 1000.0;

  t0 = std::chrono::steady_clock::now();
  const auto dual_path = dir / "dual.ckpt";
  const auto dual_st = dual_stamp(config, plan);
  if (cache && stamp_matches(dual_path, dual_st)) {
    p.vision = load_dual_checkpoint(dual_path.string());
  } else {
    p.vision = train_dual_encoder(p.corpora.paired_set, config.dual, plan.dual);
    if (cache) {
      save_checkpoint(p.vision, dual_path.string());
      write_stamp(dual_path, dual_st);
    }
  }
  if (config.calibration) {
    p.calibration = *config.calibration;
  } else {
    const auto split = calibration_split(p.world, p.corpora.heldout, 500000);
    p.calibration = calibrate(split.texts, split.images, p.vision);
  }
  p.timings.dual_s = since_ms(t0) / 1000.0;

  t0 = std::chrono::steady_clock::now();
  for (auto pl : placements) {
    if (p.fusion.count(pl)) continue;
    const auto path = dir / fusion_checkpoint_name(pl);
    const auto st = fusion_stamp(config, plan, pl);
    if (cache && stamp_matches(path, st)) {
      p.fusion.emplace(pl, load_fusion_checkpoint(path.string()));
      continue;
    }
    FusionTrainReport report;
    p.fusion.emplace(pl, train_fusion(p.lm, p.vision, p.corpora.paired_set, pl, config.fusion, plan.fusion, &report));
    p.fusion_reports.emplace(pl, std::move(report));
    if (cache) {
      save_checkpoint(p.fusion.at(pl), path.string());
      write_stamp(path, st);
    }
  }
  p.timings.fusion_s = since_ms(t0) / 1000.0;
  return p;
}

// ---- evaluation

std::uint64_t item_image_seed(std::uint64_t inference_seed, const QaItem& item) {
  return splitmix64(inference_seed ^ splitmix64(item.seed + 0x51ed27ULL * (static_cast<std::uint64_t>(item.task) + 1)));
}

std::vector<double> score_item(const QaItem& item, const InferenceConfig& config, const Models& models) {
  config.validate();
  if (item.candidates.empty()) throw DataError("QA item has no candidates");
  if (!models.lm) throw ConfigError("scoring needs an lm");
  if (config.strategy == Strategy::text_only) {
    if (item.candidates.size() >= 2) return score_candidates(item.prompt, item.candidates, *models.lm);
  }
  const auto& vocab = models.lm->vocab;
  std::vector<ImageSample> images;
  if (config.strategy != Strategy::text_only)
    images = generate_images(item.prompt, config.k, item_image_seed(config.seed, item), config.epsilon, *models.world);
  const Tokens prompt = tokenize(item.prompt, vocab);
  std::map<Tokens, Distribution> cache;
  std::vector<double> scores;
  for (const auto& cand : item.candidates) {
    const Tokens ct = encode_words(cand, vocab);
    if (ct.empty()) throw DataError("empty candidate in \"" + item.prompt + "\"");
    Tokens prefix = prompt;
    double total = 0.0;
    for (TokenId t : ct) {
      auto it = cache.find(prefix);
      if (it == cache.end()) {
        const auto bundle = predict_distributions(item.prompt, prefix, images, models, config.alignment);
        it = cache.emplace(prefix, aggregate(bundle, config.strategy, config.tau)).first;
      }
      total += std::log(it->second[t]);
      prefix.push_back(t);
    }
    scores.push_back(total / static_cast<double>(ct.size()));
  }
  return scores;
}

std::size_t predict_item(const QaItem& item, const InferenceConfig& config, const Models& models) {
  const auto s = score_item(item, config, models);
  return static_cast<std::size_t>(std::max_element(s.begin(), s.end()) - s.begin());
}

ResultRow run_task(std::span<const QaItem> items, const InferenceConfig& config, const Models& models,
                   const EvalOptions& options) {
  check_items(items);
  config.validate();
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<std::size_t> predicted(items.size());
  parallel_for(items.size(), options.threads, [&](std::size_t i) { predicted[i] = predict_item(items[i], config, models); });
  const std::string method = options.method.empty() ? std::string(strategy_name(config.strategy)) : options.method;
  return make_row(items, method, config.strategy == Strategy::text_only ? 0 : config.k, config.epsilon, config.seed,
                  predicted, since_ms(t0), options.timing);
}

ResultRow run_best_of_n(std::span<const QaItem> items, std::size_t n, const Models& models, std::uint64_t seed,
                        std::size_t max_tokens, const EvalOptions& options) {
  check_items(items);
  if (!models.lm) throw ConfigError("best-of-n needs an lm");
  const auto& lm = *models.lm;
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<std::size_t> predicted(items.size());
  parallel_for(items.size(), options.threads, [&](std::size_t i) {
    const auto& item = items[i];
    const auto best = best_of_n(item.prompt, n, lm, item_image_seed(seed, item), max_tokens);
    for (std::size_t c = 0; c < item.candidates.size(); ++c) {
      const Tokens ct = encode_words(item.candidates[c], lm.vocab);
      if (!ct.empty() && ct.size() <= best.completion.tokens.size() &&
          std::equal(ct.begin(), ct.end(), best.completion.tokens.begin())) {
        predicted[i] = c;
        return;
      }
    }
    InferenceConfig text;
    text.strategy = Strategy::text_only;
    predicted[i] = predict_item(item, text, models);
  });
  return make_row(items, options.method.empty() ? "best_of_n" : options.method, n, 0.0, seed, predicted,
                  since_ms(t0), options.timing);
}

SweepResult sweep_k(std::span<const Pipeline* const> pipelines, QaTask task, std::span<const std::size_t> k_values,
                    const InferenceConfig& base, Placement placement, double epsilon, const EvalOptions& options) {
  if (pipelines.empty()) throw ArgumentError("sweep_k needs at least one seed");
  SweepResult out;
  std::map<std::size_t, std::vector<double>> acc;
  for (const Pipeline* p : pipelines) {
    const auto items = make_qa(p->world, p->corpora.heldout, task);
    const auto models = p->models(placement);
    for (auto k : k_values) {
      InferenceConfig cfg = base;
      cfg.k = k;
      cfg.epsilon = epsilon;
      cfg.seed = p->seed;
      auto row = run_task(items, cfg, models, options);
      row.seed = p->seed;
      acc[k].push_back(row.accuracy());
      out.rows.push_back(std::move(row));
    }
  }
  for (auto k : k_values) {
    const auto& v = acc[k];
    double mean = 0.0;
    for (double a : v) mean += a;
    mean /= static_cast<double>(v.size());
    double var = 0.0;
    for (double a : v) var += (a - mean) * (a - mean);
    const double se = v.size() > 1 ? std::sqrt(var / static_cast<double>(v.size() - 1) / static_cast<double>(v.size())) : 0.0;
    out.curve.push_back({k, mean, se});
  }
  return out;
}

AblationResult ablation_matrix(std::span<const Pipeline* const> pipelines, const AblationSpec& spec,
                               const InferenceConfig& base, Placement strategy_placement, double epsilon,
                               const EvalOptions& options) {
  if (pipelines.empty()) throw ArgumentError("ablation needs at least one seed");
  AblationResult out;
  for (const Pipeline* p : pipelines) {
    for (auto task : spec.tasks) {
      const auto items = make_qa(p->world, p->corpora.heldout, task);
      for (auto pl : spec.placements) {
        for (bool multi : {false, true}) {
          const std::string cell = std::string(placement_name(pl)) + (multi ? "+multi" : "+single");
          if (!p->fusion.count(pl)) throw ConfigError("ablation cell " + cell + ": no trained fusion model");
          InferenceConfig cfg = base;
          cfg.k = multi ? base.k : 1;
          if (!multi) cfg.strategy = Strategy::single_image;
          cfg.epsilon = epsilon;
          cfg.seed = p->seed;
          EvalOptions o = options;
          o.method = cell;
          auto row = run_task(items, cfg, p->models(pl), o);
          row.seed = p->seed;
          out.placement_rows.push_back(std::move(row));
        }
      }
      for (auto s : spec.strategies) {
        if (!p->fusion.count(strategy_placement))
          throw ConfigError("ablation cell " + std::string(strategy_name(s)) + ": no trained fusion model for '" +
                            std::string(placement_name(strategy_placement)) + "'");
        InferenceConfig cfg = base;
        cfg.strategy = s;
        cfg.k = s == Strategy::single_image ? 1 : base.k;
        cfg.epsilon = epsilon;
        cfg.seed = p->seed;
        EvalOptions o = options;
        o.method.clear();
        auto row = run_task(items, cfg, p->models(strategy_placement), o);
        row.seed = p->seed;
        out.strategy_rows.push_back(std::move(row));
      }
    }
  }
  return out;
}

std::map<std::pair<std::string, std::string>, double> mean_accuracy(std::span<const ResultRow> rows) {
  std::map<std::pair<std::string, std::string>, std::pair<double, std::size_t>> acc;
  for (const auto& r : rows) {
    auto& a = acc[{r.task, r.method}];
    a.first += r.accuracy();
    ++a.second;
  }
  std::map<std::pair<std::string, std::string>, double> out;
  for (const auto& [key, v] : acc) out[key] = v.first / static_cast<double>(v.second);
  return out;
}

namespace {

std::string table(std::span<const ResultRow> rows, const std::vector<std::string>& methods, const std::string& head,
                  const std::function<std::string(const std::string&)>& label) {
  std::vector<std::string> tasks;
  for (const auto& r : rows)
    if (std::find(tasks.begin(), tasks.end(), r.task) == tasks.end()) tasks.push_back(r.task);
  const auto means = mean_accuracy(rows);
  std::ostringstream out;
  out << "| " << head << " |";
  for (const auto& t : tasks) out << " " << t << " |";
  out << "\n|" << std::string(head.size() + 2, '-') << "|";
  for (const auto& t : tasks) out << std::string(t.size() + 2, '-') << "|";
  out << "\n";
  for (const auto& m : methods) {
    out << "| " << label(m) << " |";
    for (const auto& t : tasks) {
      const auto it = means.find({t, m});
      char buf[32];
      if (it == means.end()) {
        std::snprintf(buf, sizeof(buf), "-");
      } else {
        std::snprintf(buf, sizeof(buf), "%.1f", 100.0 * it->second);
      }
      out << " " << buf << " |";
    }
    out << "\n";
  }
  return out.str();
}

}  // namespace

std::string placement_table(std::span<const ResultRow> rows) {
  std::vector<std::string> methods;
  for (auto p : kPlacements)
    for (const char* m : {"+single", "+multi"}) methods.push_back(std::string(placement_name(p)) + m);
  return table(rows, methods, "fusion | multi-image", [](const std::string& m) {
    const auto plus = m.find('+');
    return m.substr(0, plus) + " | " + (m.substr(plus + 1) == "multi" ? "yes" : "no");
  });
}

std::string strategy_table(std::span<const ResultRow> rows) {
  std::vector<std::string> methods;
  for (const auto& r : rows)
    if (std::find(methods.begin(), methods.end(), r.method) == methods.end()) methods.push_back(r.method);
  return table(rows, methods, "aggregation", [](const std::string& m) { return m; });
}

// ---- budget

std::size_t matched_n(double target_ms, double sample_ms) {
  if (!(target_ms > 0.0) || !(sample_ms > 0.0)) throw MeasurementError("timer resolution too coarse: zero timings");
  return static_cast<std::size_t>(std::max(1.0, std::round(target_ms / sample_ms)));
}

namespace {

// Per-prompt ms of one pass over the prompts, repeating the pass until at least
// 50 ms have elapsed so that short pipelines are not timed at timer-noise scale.
template <class F>
double per_prompt_ms(std::size_t count, F&& run_prompt) {
  constexpr double kMinPassMs = 50.0;
  const auto t0 = std::chrono::steady_clock::now();
  std::size_t loops = 0;
  do {
    for (std::size_t i = 0; i < count; ++i) run_prompt(i);
    ++loops;
  } while (since_ms(t0) < kMinPassMs);
  return since_ms(t0) / static_cast<double>(loops * count);
}

}  // namespace

Budget compute_matched_budget(const InferenceConfig& target, const Models& models, std::span<const std::string> prompts,
                              std::size_t max_tokens, std::size_t repetitions) {
  if (prompts.size() < 20) throw ArgumentError("budget calibration needs at least 20 prompts");
  if (repetitions < 5) throw ArgumentError("budget calibration needs at least 5 repetitions");
  std::vector<double> target_ms, sample_ms;
  for (std::size_t r = 0; r < repetitions; ++r) {
    target_ms.push_back(per_prompt_ms(prompts.size(), [&](std::size_t i) {
      InferenceConfig cfg = target;
      cfg.seed = i;
      (void)infer(prompts[i], cfg, models);
    }));
    sample_ms.push_back(per_prompt_ms(prompts.size(), [&](std::size_t i) {
      (void)sample(prompts[i], 1.0, i, max_tokens, *models.lm);
    }));
  }
  Budget b;
  b.target_ms = median(target_ms);
  b.sample_ms = median(sample_ms);
  b.n = matched_n(b.target_ms, b.sample_ms);
  // best_of_n(N) is not exactly N single samples; refine N once from its measured per-sample cost
  const auto check = measure_budget(b, target, models, prompts, max_tokens, repetitions);
  b.n = matched_n(1.0, check.ratio / static_cast<double>(b.n));
  return b;
}

BudgetCheck measure_budget(const Budget& budget, const InferenceConfig& target, const Models& models,
                           std::span<const std::string> prompts, std::size_t max_tokens, std::size_t repetitions) {
  if (prompts.empty()) throw ArgumentError("no prompts to time");
  std::vector<double> bon, tgt, ratio;
  for (std::size_t r = 0; r < std::max<std::size_t>(repetitions, 1); ++r) {
    bon.push_back(per_prompt_ms(prompts.size(), [&](std::size_t i) {
      (void)best_of_n(prompts[i], budget.n, *models.lm, i * budget.n, max_tokens);
    }));
    tgt.push_back(per_prompt_ms(prompts.size(), [&](std::size_t i) {
      InferenceConfig cfg = target;
      cfg.seed = i;
      (void)infer(prompts[i], cfg, models);
    }));
    ratio.push_back(bon.back() / tgt.back());
  }
  return {median(bon), median(tgt), median(ratio)};
}

// ---- reports

std::vector<ResultRow> sorted_rows(std::span<const ResultRow> rows) {
  std::vector<ResultRow> out(rows.begin(), rows.end());
  std::stable_sort(out.begin(), out.end(), [](const ResultRow& a, const ResultRow& b) {
    return std::tie(a.task, a.method, a.k, a.seed, a.epsilon) < std::tie(b.task, b.method, b.k, b.seed, b.epsilon);
  });
  return out;
}

std::string rows_csv(std::span<const ResultRow> rows) {
  std::string out = "task,method,k,epsilon,seed,accuracy,count,ms\n";
  for (const auto& r : sorted_rows(rows)) {
    out += r.task + "," + r.method + "," + std::to_string(r.k) + "," + num(r.epsilon) + "," + std::to_string(r.seed) +
           "," + num(r.accuracy()) + "," + std::to_string(r.count) + "," + num(r.ms) + "\n";
  }
  return out;
}

std::string rows_json(std::span<const ResultRow> rows) {
  json arr = json::array();
  for (const auto& r : sorted_rows(rows)) {
    arr.push_back({{"task", r.task},
                   {"method", r.method},
                   {"k", r.k},
                   {"epsilon", r.epsilon},
                   {"seed", r.seed},
                   {"accuracy", r.accuracy()},
                   {"count", r.count},
                   {"ms", r.ms}});
  }
  return arr.dump(2) + "\n";
}

namespace {

std::size_t correct_from(double accuracy, std::size_t count) {
  return static_cast<std::size_t>(std::llround(accuracy * static_cast<double>(count)));
}

}  // namespace

std::vector<ResultRow> rows_from_json(const std::string& text) {
  std::vector<ResultRow> rows;
  try {
    for (const auto& j : json::parse(text)) {
      check_keys(j, "row", {"task", "method", "k", "epsilon", "seed", "accuracy", "count", "ms"});
      ResultRow r;
      r.task = j.at("task").get<std::string>();
      r.method = j.at("method").get<std::string>();
      r.k = j.at("k").get<std::size_t>();
      r.epsilon = j.at("epsilon").get<double>();
      r.seed = j.at("seed").get<std::uint64_t>();
      r.count = j.at("count").get<std::size_t>();
      r.correct = correct_from(j.at("accuracy").get<double>(), r.count);
      r.ms = j.at("ms").get<double>();
      rows.push_back(std::move(r));
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("bad report json: ") + e.what());
  } catch (const ConfigError& e) {
    throw DataError(e.what());
  }
  return rows;
}

std::vector<ResultRow> rows_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "task,method,k,epsilon,seed,accuracy,count,ms")
    throw DataError("bad report csv header");
  std::vector<ResultRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != 8) throw DataError("bad report csv row: " + line);
    try {
      ResultRow r;
      r.task = f[0];
      r.method = f[1];
      r.k = std::stoull(f[2]);
      r.epsilon = std::stod(f[3]);
      r.seed = std::stoull(f[4]);
      r.count = std::stoull(f[6]);
      r.correct = correct_from(std::stod(f[5]), r.count);
      r.ms = std::stod(f[7]);
      rows.push_back(std::move(r));
    } catch (const std::exception&) {
      throw DataError("bad report csv row: " + line);
    }
  }
  return rows;
}

std::string curve_csv(std::span<const CurvePoint> curve) {
  std::string out = "k,mean_accuracy,stderr\n";
  for (const auto& p : curve) out += std::to_string(p.k) + "," + num(p.mean) + "," + num(p.stderr_) + "\n";
  return out;
}

void write_text(const std::string& path, const std::string& text) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out << text;
  if (!out) throw DataError("failed writing " + path);
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_report(std::span<const ResultRow> rows, const std::string& dir, const std::string& stem) {
  if (rows.empty()) throw ArgumentError("report needs at least one row");
  write_text((std::filesystem::path(dir) / (stem + ".csv")).string(), rows_csv(rows));
  write_text((std::filesystem::path(dir) / (stem + ".json")).string(), rows_json(rows));
}

}  // namespace lami
