// lami: command-line driver for the desk-scale experiments.

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lami/bench.hpp"
#include "lami/errors.hpp"

using namespace lami;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Checks {
  int failed = 0;
  void hard(bool ok, const std::string& what) {
    std::printf("[%s] %s\n", ok ? "PASS" : "FAIL", what.c_str());
    failed += !ok;
  }
  void soft(bool ok, const std::string& what) {
    std::printf("[%s] %s\n", ok ? "PASS" : "WARN", what.c_str());
  }
  int exit_code() const { return failed == 0 ? 0 : 1; }
};

struct Args {
  std::string config;
  std::uint64_t seed = 0;
  std::string placement;
};

RunConfig load(const Args& a) { return a.config.empty() ? RunConfig{} : load_run_config(a.config); }

std::vector<std::uint64_t> run_seeds(const RunConfig& c, std::uint64_t base) {
  std::vector<std::uint64_t> out;
  for (auto s : c.seeds) out.push_back(base + s);
  return out;
}

EvalOptions eval_options(const RunConfig& c, std::string method = {}) {
  return {c.threads, c.report_timing, std::move(method)};
}

std::string fmt(const char* f, double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, x);
  return buf;
}

std::string cache_of(const RunConfig& c, std::uint64_t seed) { return pipeline_dir(c.output_dir, seed); }

Pipeline pipeline(const RunConfig& c, std::uint64_t seed, std::vector<Placement> placements) {
  std::printf("seed %llu: preparing models in %s\n", static_cast<unsigned long long>(seed), cache_of(c, seed).c_str());
  std::fflush(stdout);
  auto p = build_pipeline(c, seed, placements, cache_of(c, seed));
  std::printf("seed %llu: lm %.1fs, dual %.1fs, fusion %.1fs\n", static_cast<unsigned long long>(seed), p.timings.lm_s,
              p.timings.dual_s, p.timings.fusion_s);
  return p;
}

InferenceConfig run_inference(const RunConfig& c, std::uint64_t seed) {
  InferenceConfig cfg = c.inference;
  cfg.epsilon = c.epsilon;
  cfg.seed = seed;
  return cfg;
}

void rows_in_range(Checks& checks, const std::vector<ResultRow>& rows) {
  bool ok = !rows.empty();
  for (const auto& r : rows) ok = ok && r.count > 0 && r.correct <= r.count;
  checks.hard(ok, "every report row has items and accuracy in [0, 1]");
}

// ---- subcommands

int gen_world(const Args& a) {
  const auto c = load(a);
  const auto plan = seed_plan(c, a.seed);
  const auto world = build_world(plan.world, c.world.objects);
  const auto corpora = emit_corpora(world, c.world.heldout_fraction, plan.world);
  const auto dir = fs::path(cache_of(c, a.seed));
  fs::create_directories(dir / "renders");
  write_world_json(world, (dir / "world.json").string());
  write_corpus(corpora.lm_corpus, (dir / "lm_corpus.txt").string());
  write_paired_jsonl(corpora.paired_set, world, (dir / "paired.jsonl").string());
  Checks checks;
  for (auto task : c.tasks) {
    const auto items = make_qa(world, corpora.heldout, task);
    write_qa_jsonl(items, world, (dir / ("qa-" + std::string(qa_task_name(task)) + ".jsonl")).string());
    bool ok = !items.empty();
    for (const auto& it : items) ok = ok && it.gold < it.candidates.size();
    checks.hard(ok, "held-out " + std::string(qa_task_name(task)) + " QA set: " + std::to_string(items.size()) + " items");
  }
  for (std::size_t o = 0; o < std::min<std::size_t>(4, world.objects.size()); ++o) {
    const auto img = render(world.objects[o].attrs, o, c.epsilon);
    write_ppm(img, (dir / "renders" / ppm_filename(world.objects[o].name, o)).string());
  }
  std::printf("world: %zu objects, %zu held out, lm corpus %zu sentences, %zu paired examples -> %s\n",
              world.objects.size(), corpora.heldout.objects.size(), corpora.lm_corpus.size(), corpora.paired_set.size(),
              dir.string().c_str());
  checks.hard(world.objects.size() == c.world.objects, "world has the configured object count");
  checks.hard(!corpora.heldout.objects.empty(), "some facts are held out");
  checks.hard(read_world_json((dir / "world.json").string()).objects.size() == world.objects.size(),
              "world file reads back");
  return checks.exit_code();
}

int pretrain_lm(const Args& a) {
  const auto c = load(a);
  const auto p = pipeline(c, a.seed, {});
  const auto report_path = fs::path(cache_of(c, a.seed)) / "lm_report.json";
  json r;
  if (p.lm_trained) {
    r = {{"final_train_loss", p.lm_report.final_train_loss},
         {"validation_loss", p.lm_report.validation_loss},
         {"unigram_entropy", p.lm_report.unigram_entropy},
         {"train_sequences", p.lm_report.train_sequences},
         {"validation_sequences", p.lm_report.validation_sequences},
         {"hash", p.lm.hash()}};
    write_text(report_path.string(), r.dump(2) + "\n");
  } else {
    r = json::parse(read_text(report_path.string()));
    std::printf("lm loaded from cache\n");
  }
  const double val = r.at("validation_loss"), uni = r.at("unigram_entropy");
  std::printf("lm: vocab %zu, train loss %.4f, validation loss %.4f, unigram entropy %.4f\n", p.lm.vocab.size(),
              r.at("final_train_loss").get<double>(), val, uni);
  Checks checks;
  checks.hard(std::isfinite(val), "validation loss is finite");
  checks.hard(val < uni, "validation loss beats the unigram baseline");
  checks.hard(r.at("hash").get<std::uint64_t>() == p.lm.hash(), "saved checkpoint matches the trained weights");
  return checks.exit_code();
}

int pretrain_percept(const Args& a) {
  const auto c = load(a);
  const auto p = pipeline(c, a.seed, {});
  const auto dir = fs::path(cache_of(c, a.seed));
  write_text((dir / "calibration.json").string(),
             json{{"s_lo", p.calibration.s_lo}, {"s_hi", p.calibration.s_hi}}.dump(2) + "\n");
  const auto split = calibration_split(p.world, p.corpora.heldout, 500000);
  double matched = 0.0, mismatched = 0.0;
  const std::size_t n = split.texts.size();
  for (std::size_t i = 0; i < n; ++i) {
    matched += alignment(split.texts[i], split.images[i], p.vision, p.calibration).s;
    mismatched += alignment(split.texts[i], split.images[(i + n / 2 + 1) % n], p.vision, p.calibration).s;
  }
  matched /= static_cast<double>(n);
  mismatched /= static_cast<double>(n);
  std::printf("dual encoder: calibration [%.4f, %.4f], mean cosine matched %.4f, shifted %.4f\n", p.calibration.s_lo,
              p.calibration.s_hi, matched, mismatched);
  Checks checks;
  checks.hard(p.calibration.s_hi > p.calibration.s_lo, "calibration range is non-empty");
  checks.hard(matched > mismatched, "matched pairs score above mismatched pairs");
  return checks.exit_code();
}

std::vector<Placement> placements_arg(const RunConfig& c, const std::string& arg) {
  if (arg.empty()) return {c.placement};
  if (arg == "all") return {kPlacements.begin(), kPlacements.end()};
  return {parse_placement(arg)};
}

int train_fusion_cmd(const Args& a) {
  const auto c = load(a);
  const auto placements = placements_arg(c, a.placement);
  const auto p = pipeline(c, a.seed, placements);
  Checks checks;
  const auto items = make_qa(p.world, p.corpora.heldout, QaTask::color);
  const auto zv = encode_image(render(p.world.objects.front().attrs, 1, 0.0), p.vision);
  for (auto pl : placements) {
    const std::string name(placement_name(pl));
    if (const auto it = p.fusion_reports.find(pl); it != p.fusion_reports.end()) {
      const auto& r = it->second;
      std::printf("%s: stage 1 loss %.4f, stage 2 loss %.4f\n", name.c_str(), r.stage1_final_loss, r.stage2_final_loss);
      checks.hard(r.lm_hash_before == r.lm_hash_after && r.vision_hash_before == r.vision_hash_after,
                  name + ": frozen lm and vision weights unchanged by training");
      checks.hard(std::isfinite(r.stage2_final_loss), name + ": training loss is finite");
    } else {
      std::printf("%s: loaded from cache\n", name.c_str());
    }
    FusionParams zeroed = p.fusion.at(pl);
    zero_visual_pathway(zeroed);
    double worst = 0.0;
    for (const auto& it : items) {
      const auto tokens = tokenize(it.prompt, p.lm.vocab);
      const auto want = lm_forward(tokens, p.lm).logits;
      const auto got = fuse_images(zeroed, tokens, std::span(&zv, 1), p.lm).front();
      for (std::size_t i = 0; i < want.data().size(); ++i) worst = std::max(worst, std::abs(want.data()[i] - got.data()[i]));
    }
    checks.hard(worst <= 1e-9, name + ": closed visual pathway recovers the text-only logits (max diff " +
                                   fmt("%.2e", worst) + ")");
  }
  return checks.exit_code();
}

int eval_cmd(const Args& a) {
  const auto c = load(a);
  const auto p = pipeline(c, a.seed, {c.placement});
  const auto models = p.models(c.placement);
  std::vector<ResultRow> rows;
  for (auto task : c.tasks) {
    const auto items = make_qa(p.world, p.corpora.heldout, task);
    InferenceConfig text = run_inference(c, a.seed);
    text.strategy = Strategy::text_only;
    rows.push_back(run_task(items, text, models, eval_options(c)));
    rows.push_back(run_task(items, run_inference(c, a.seed), models, eval_options(c)));
  }
  for (const auto& r : sorted_rows(rows))
    std::printf("%-10s %-16s k=%zu eps=%.2f  %zu/%zu = %.3f\n", r.task.c_str(), r.method.c_str(), r.k, r.epsilon,
                r.correct, r.count, r.accuracy());
  const std::string stem = "eval-seed" + std::to_string(a.seed);
  write_report(rows, c.output_dir, stem);
  Checks checks;
  checks.hard(rows.size() == 2 * c.tasks.size(), "one text-only and one fused row per task");
  rows_in_range(checks, rows);
  return checks.exit_code();
}

std::vector<Pipeline> pipelines(const RunConfig& c, std::uint64_t base, const std::vector<Placement>& placements) {
  std::vector<Pipeline> out;
  for (auto s : run_seeds(c, base)) out.push_back(pipeline(c, s, placements));
  return out;
}

std::vector<const Pipeline*> pointers(const std::vector<Pipeline>& ps) {
  std::vector<const Pipeline*> out;
  for (const auto& p : ps) out.push_back(&p);
  return out;
}

int ablate(const Args& a) {
  const auto c = load(a);
  const std::vector<Placement> all(kPlacements.begin(), kPlacements.end());
  const auto ps = pipelines(c, a.seed, all);
  AblationSpec spec;
  spec.tasks = c.tasks;
  InferenceConfig base = c.inference;
  const auto m = ablation_matrix(pointers(ps), spec, base, c.placement, c.epsilon, eval_options(c));
  write_report(m.placement_rows, c.output_dir, "ablate-placement");
  write_report(m.strategy_rows, c.output_dir, "ablate-strategy");
  const auto t2 = placement_table(m.placement_rows);
  const auto t6 = strategy_table(m.strategy_rows);
  write_text((fs::path(c.output_dir) / "ablate-tables.md").string(), t2 + "\n" + t6);
  std::printf("%s\n%s\n", t2.c_str(), t6.c_str());
  Checks checks;
  checks.hard(m.placement_rows.size() == 6 * c.tasks.size() * ps.size(), "placement x multi-image matrix is complete");
  checks.hard(m.strategy_rows.size() == spec.strategies.size() * c.tasks.size() * ps.size(),
              "aggregation matrix is complete");
  rows_in_range(checks, m.placement_rows);
  const auto means = mean_accuracy(m.placement_rows);
  for (auto task : c.tasks) {
    const std::string t(qa_task_name(task));
    double best = 0.0;
    for (const auto& [key, v] : means)
      if (key.first == t) best = std::max(best, v);
    const double late = means.at({t, "late+multi"});
    checks.soft(late >= best, t + ": late+multi has the best mean accuracy (" + fmt("%.3f", late) + " vs best " +
                                  fmt("%.3f", best) + ")");
  }
  return checks.exit_code();
}

int sweep(const Args& a) {
  const auto c = load(a);
  const auto ps = pipelines(c, a.seed, {c.placement});
  Checks checks;
  std::vector<ResultRow> rows;
  for (auto task : c.tasks) {
    const auto s = sweep_k(pointers(ps), task, c.k_values, c.inference, c.placement, c.epsilon, eval_options(c));
    const std::string t(qa_task_name(task));
    write_text((fs::path(c.output_dir) / ("curve-" + t + ".csv")).string(), curve_csv(s.curve));
    std::printf("%s\n", t.c_str());
    for (const auto& pt : s.curve) std::printf("  k=%zu  %.3f +- %.3f\n", pt.k, pt.mean, pt.stderr_);
    checks.hard(s.rows.size() == c.k_values.size() * ps.size() && s.curve.size() == c.k_values.size(),
                t + ": one row per (seed, k) and one curve point per k");
    bool monotone = true;
    for (std::size_t i = 1; i < s.curve.size(); ++i) monotone = monotone && s.curve[i].mean >= s.curve[i - 1].mean;
    checks.soft(monotone, t + ": mean accuracy is non-decreasing in k");
    rows.insert(rows.end(), s.rows.begin(), s.rows.end());
  }
  write_report(rows, c.output_dir, "sweep-k");
  rows_in_range(checks, rows);
  return checks.exit_code();
}

int budget_cmd(const Args& a) {
  const auto c = load(a);
  const auto p = pipeline(c, a.seed, {c.placement});
  const auto models = p.models(c.placement);
  InferenceConfig target = run_inference(c, a.seed);
  const auto prompts = calibration_split(p.world, p.corpora.heldout, 500000).texts;
  const auto b = compute_matched_budget(target, models, prompts, c.best_of_n_max_tokens);
  const auto m = measure_budget(b, target, models, prompts, c.best_of_n_max_tokens);
  const double ratio = m.ratio;
  std::printf("target %.3f ms, one sample %.3f ms -> N = %zu; measured best-of-N %.3f ms vs target %.3f ms (ratio %.3f)\n",
              b.target_ms, b.sample_ms, b.n, m.best_of_n_ms, m.target_ms, ratio);
  write_text((fs::path(c.output_dir) / ("budget-seed" + std::to_string(a.seed) + ".json")).string(),
             json{{"n", b.n},
                  {"target_ms", b.target_ms},
                  {"sample_ms", b.sample_ms},
                  {"best_of_n_ms", m.best_of_n_ms},
                  {"measured_target_ms", m.target_ms},
                  {"ratio", m.ratio}}
                     .dump(2) + "\n");
  std::vector<ResultRow> rows;
  for (auto task : c.tasks) {
    const auto items = make_qa(p.world, p.corpora.heldout, task);
    InferenceConfig text = target;
    text.strategy = Strategy::text_only;
    rows.push_back(run_task(items, text, models, eval_options(c)));
    rows.push_back(run_best_of_n(items, b.n, models, a.seed, c.best_of_n_max_tokens, eval_options(c)));
    rows.push_back(run_task(items, target, models, eval_options(c)));
  }
  for (const auto& r : sorted_rows(rows))
    std::printf("%-10s %-12s k=%zu  %.3f\n", r.task.c_str(), r.method.c_str(), r.k, r.accuracy());
  write_report(rows, c.output_dir, "budget-rows-seed" + std::to_string(a.seed));
  Checks checks;
  checks.hard(b.n >= 1, "budget N is at least 1");
  checks.hard(std::abs(ratio - 1.0) <= 0.10, "best-of-N runtime within 10% of the target pipeline");
  rows_in_range(checks, rows);
  return checks.exit_code();
}

int report(const Args& a) {
  const auto c = load(a);
  Checks checks;
  std::vector<std::string> stems;
  if (fs::exists(c.output_dir))
    for (const auto& e : fs::directory_iterator(c.output_dir))
      if (e.path().extension() == ".csv" && fs::exists(fs::path(e.path()).replace_extension(".json")) &&
          !e.path().stem().string().starts_with("curve-"))
        stems.push_back(e.path().stem().string());
  std::sort(stems.begin(), stems.end());
  checks.hard(!stems.empty(), "reports found in " + c.output_dir);
  std::string summary;
  for (const auto& stem : stems) {
    const auto base = fs::path(c.output_dir) / stem;
    const auto from_json = rows_from_json(read_text(base.string() + ".json"));
    const auto csv = read_text(base.string() + ".csv");
    checks.hard(rows_csv(from_json) == csv, stem + ": csv and json carry the same rows");
    rows_in_range(checks, from_json);
    summary += "## " + stem + "\n\n| task | method | seeds | mean accuracy |\n|---|---|---|---|\n";
    std::map<std::pair<std::string, std::string>, std::size_t> n;
    for (const auto& r : from_json) ++n[{r.task, r.method}];
    for (const auto& [key, v] : mean_accuracy(from_json))
      summary += "| " + key.first + " | " + key.second + " | " + std::to_string(n[key]) + " | " + fmt("%.3f", v) + " |\n";
    summary += "\n";
  }
  if (!stems.empty()) write_text((fs::path(c.output_dir) / "summary.md").string(), summary);
  std::printf("%s", summary.c_str());
  return checks.exit_code();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"lami: desk-scale imagination-augmented language model experiments"};
  app.require_subcommand(1);
  Args args;
  int code = 0;
  auto add = [&](const char* name, const char* help, int (*fn)(const Args&)) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", args.config, "run config (JSON)")->check(CLI::ExistingFile);
    sub->add_option("--seed", args.seed, "run seed; multi-seed commands add it to each configured seed");
    sub->callback([&code, fn, &args] { code = fn(args); });
    return sub;
  };
  add("gen-world", "generate the world, corpora and QA sets", gen_world);
  add("pretrain-lm", "train the text language model", pretrain_lm);
  add("pretrain-percept", "train the dual encoder and calibrate alignment scores", pretrain_percept);
  add("train-fusion", "train the fusion layers", train_fusion_cmd)
      ->add_option("--placement", args.placement, "early, intermediate, late or all");
  add("eval", "evaluate text-only and fused inference on held-out QA", eval_cmd);
  add("ablate", "placement and aggregation ablations over seeds", ablate);
  add("sweep-k", "accuracy as a function of the number of images", sweep);
  add("budget", "compute-matched best-of-N baseline", budget_cmd);
  add("report", "check and summarize the reports in the output directory", report);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const lami::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return code;
}
