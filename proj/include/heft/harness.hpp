#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"

#include "heft/checkpoint.hpp"
#include "heft/data.hpp"
#include "heft/lora.hpp"
#include "heft/model.hpp"
#include "heft/reft.hpp"
#include "heft/train.hpp"

namespace heft {

enum class AnswerLabel { yes, no, unknown };

inline const char* to_string(AnswerLabel label) {
  switch (label) {
    case AnswerLabel::yes: return "Yes";
    case AnswerLabel::no: return "No";
    case AnswerLabel::unknown: return "Unknown";
  }
  return "Unknown";
}

// Case-sensitive substring rule, "Yes" checked first.
inline AnswerLabel extract_answer(std::string_view text) {
  if (text.find("Yes") != std::string_view::npos) return AnswerLabel::yes;
  if (text.find("No") != std::string_view::npos) return AnswerLabel::no;
  return AnswerLabel::unknown;
}

inline double round_accuracy_percent(std::size_t correct, std::size_t total) {
  if (total == 0) throw std::invalid_argument("accuracy: empty evaluation");
  return std::round(10000.0 * static_cast<double>(correct) / static_cast<double>(total)) / 100.0;
}

struct EvalReport {
  std::size_t lora_epochs = 0;
  std::size_t reft_epochs = 0;
  std::size_t num_validation_samples = 0;
  std::size_t correct_predictions = 0;
  double accuracy_percent = 0.0;
  double wall_seconds = 0.0;
  std::size_t unknown_predictions = 0;  // includes overlong prompts
  std::size_t overlong_prompts = 0;
};

namespace detail {

inline EvalReport evaluate_core(const ModelWeights& model, const ReftConfig* reft_config,
                                const LoreftParams* reft_params,
                                std::span<const BoolExample> examples, const ByteTokenizer& tok,
                                std::size_t max_new, std::ostream* log) {
  if (examples.empty()) throw std::invalid_argument("evaluate: no examples");
  const auto start = std::chrono::steady_clock::now();
  EvalReport report;
  report.num_validation_samples = examples.size();
  for (const auto& ex : examples) {
    std::vector<int> prompt{ByteTokenizer::bos_id};
    for (int id : tok.tokenize(format_prompt(ex))) prompt.push_back(id);
    if (prompt.size() + max_new > model.config.max_seq) {
      report.unknown_predictions += 1;
      report.overlong_prompts += 1;
      if (log) {
        *log << "evaluate: prompt of " << prompt.size() << " tokens exceeds max_seq "
             << model.config.max_seq << "; counted as Unknown\n";
      }
      continue;
    }
    ForwardOptions opt;
    if (reft_config && reft_params) {
      opt.hooks.push_back(loreft_hook(*reft_params, reft_config->layer, prompt.size() - 1));
    }
    std::vector<int> seq = generate_greedy(model, prompt, max_new, opt, ByteTokenizer::eos_id);
    std::vector<int> generated(seq.begin() + static_cast<std::ptrdiff_t>(prompt.size()), seq.end());
    const AnswerLabel label = extract_answer(tok.detokenize(generated));
    if (label == AnswerLabel::unknown) report.unknown_predictions += 1;
    const AnswerLabel truth = ex.answer ? AnswerLabel::yes : AnswerLabel::no;
    if (label == truth) report.correct_predictions += 1;
  }
  report.accuracy_percent =
      round_accuracy_percent(report.correct_predictions, report.num_validation_samples);
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace detail

inline EvalReport evaluate(const ModelWeights& model, std::span<const BoolExample> examples,
                           const ByteTokenizer& tok, std::size_t max_new = 5,
                           std::ostream* log = &std::cerr) {
  return detail::evaluate_core(model, nullptr, nullptr, examples, tok, max_new, log);
}

inline EvalReport evaluate(const ReftModel& model, std::span<const BoolExample> examples,
                           const ByteTokenizer& tok, std::size_t max_new = 5,
                           std::ostream* log = &std::cerr) {
  return detail::evaluate_core(model.base, &model.config, &model.params, examples, tok, max_new,
                               log);
}

inline std::string method_label(std::size_t lora_epochs, std::size_t reft_epochs) {
  if (lora_epochs > 0 && reft_epochs > 0) return "heft";
  if (lora_epochs > 0) return "lora_only";
  if (reft_epochs > 0) return "reft_only";
  return "base";
}

struct RunRecord {
  std::string method;
  std::size_t lora_epochs = 0;
  std::size_t reft_epochs = 0;
  StageReport lora_report;
  StageReport reft_report;
  EvalReport eval;
  std::uint64_t seed = 0;
  std::string created;
};

inline std::string iso_timestamp_utc() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Results object: the five canonical fields at the top level, everything
// else namespaced under "heft".
inline nlohmann::json results_json(const RunRecord& rec) {
  nlohmann::json j;
  j["lora_epochs"] = rec.lora_epochs;
  j["reft_epochs"] = rec.reft_epochs;
  j["num_validation_samples"] = rec.eval.num_validation_samples;
  j["correct_predictions"] = rec.eval.correct_predictions;
  j["accuracy"] = rec.eval.accuracy_percent;
  nlohmann::json ext;
  ext["method"] = rec.method;
  ext["seed"] = rec.seed;
  ext["created"] = rec.created;
  ext["wall_seconds"] = {{"lora", rec.lora_report.wall_seconds},
                         {"reft", rec.reft_report.wall_seconds},
                         {"eval", rec.eval.wall_seconds}};
  ext["final_mean_loss"] = {{"lora", rec.lora_report.final_mean_loss},
                            {"reft", rec.reft_report.final_mean_loss}};
  ext["trainable_params"] = {{"lora", rec.lora_report.trainable_param_count},
                             {"reft", rec.reft_report.trainable_param_count}};
  ext["optimizer_steps"] = {{"lora", rec.lora_report.optimizer_steps},
                            {"reft", rec.reft_report.optimizer_steps}};
  ext["unknown_predictions"] = rec.eval.unknown_predictions;
  ext["overlong_prompts"] = rec.eval.overlong_prompts;
  j["heft"] = std::move(ext);
  return j;
}

inline RunRecord run_record_from_json(const nlohmann::json& j) {
  RunRecord rec;
  rec.lora_epochs = j.at("lora_epochs").get<std::size_t>();
  rec.reft_epochs = j.at("reft_epochs").get<std::size_t>();
  rec.eval.lora_epochs = rec.lora_epochs;
  rec.eval.reft_epochs = rec.reft_epochs;
  rec.eval.num_validation_samples = j.at("num_validation_samples").get<std::size_t>();
  rec.eval.correct_predictions = j.at("correct_predictions").get<std::size_t>();
  rec.eval.accuracy_percent = j.at("accuracy").get<double>();
  if (j.contains("heft")) {
    const auto& ext = j["heft"];
    rec.method = ext.value("method", method_label(rec.lora_epochs, rec.reft_epochs));
    rec.seed = ext.value("seed", std::uint64_t{0});
    rec.created = ext.value("created", "");
    if (ext.contains("wall_seconds")) {
      rec.lora_report.wall_seconds = ext["wall_seconds"].value("lora", 0.0);
      rec.reft_report.wall_seconds = ext["wall_seconds"].value("reft", 0.0);
      rec.eval.wall_seconds = ext["wall_seconds"].value("eval", 0.0);
    }
  } else {
    rec.method = method_label(rec.lora_epochs, rec.reft_epochs);
  }
  return rec;
}

inline void write_results_file(const std::string& path, const RunRecord& rec) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write results file: " + path);
  out << results_json(rec).dump(4) << "\n";
}

inline int run_minutes(const RunRecord& rec) {
  const double total = rec.lora_report.wall_seconds + rec.reft_report.wall_seconds;
  return static_cast<int>(std::llround(total / 60.0));
}

inline std::string format_accuracy(double accuracy_percent) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", accuracy_percent);
  return buf;
}

inline std::string emit_comparison_csv(std::span<const RunRecord> records) {
  std::string out = "method,lora_epochs,reft_epochs,accuracy,minutes\n";
  for (const auto& rec : records) {
    out += rec.method + "," + std::to_string(rec.lora_epochs) + "," +
           std::to_string(rec.reft_epochs) + "," + format_accuracy(rec.eval.accuracy_percent) +
           "," + std::to_string(run_minutes(rec)) + "\n";
  }
  return out;
}

// Plot rows `minutes accuracy label`. Class letters follow the figure's
// method order: the cheapest heft run is 'a', reft_only 'b', lora_only 'c',
// remaining runs 'd'.
inline std::string emit_plot_data(std::span<const RunRecord> records) {
  if (records.empty()) throw std::invalid_argument("emit_plot_data: no records");
  std::size_t cheapest_heft = records.size();
  std::size_t cheapest_total = 0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].method != "heft") continue;
    const std::size_t total = records[i].lora_epochs + records[i].reft_epochs;
    if (cheapest_heft == records.size() || total < cheapest_total) {
      cheapest_heft = i;
      cheapest_total = total;
    }
  }
  std::string out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    char label = 'd';
    if (records[i].method == "heft" && i == cheapest_heft) {
      label = 'a';
    } else if (records[i].method == "reft_only") {
      label = 'b';
    } else if (records[i].method == "lora_only") {
      label = 'c';
    }
    out += std::to_string(run_minutes(records[i])) + " " +
           format_accuracy(records[i].eval.accuracy_percent) + " " + label + "\n";
  }
  return out;
}

// ---- checkpoint packing -----------------------------------------------

inline nlohmann::json model_config_json(const ModelConfig& cfg) {
  return nlohmann::json{{"n_layers", cfg.n_layers}, {"d_model", cfg.d_model},
                        {"n_heads", cfg.n_heads},   {"d_ff", cfg.d_ff},
                        {"vocab_size", cfg.vocab_size}, {"max_seq", cfg.max_seq},
                        {"seed", cfg.seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  cfg.n_layers = j.at("n_layers").get<std::size_t>();
  cfg.d_model = j.at("d_model").get<std::size_t>();
  cfg.n_heads = j.at("n_heads").get<std::size_t>();
  cfg.d_ff = j.at("d_ff").get<std::size_t>();
  cfg.vocab_size = j.at("vocab_size").get<std::size_t>();
  cfg.max_seq = j.at("max_seq").get<std::size_t>();
  cfg.seed = j.value("seed", std::uint64_t{0});
  cfg.validate();
  return cfg;
}

struct LoadedArtifact {
  ModelWeights model;
  std::optional<ReftConfig> reft_config;
  std::optional<LoreftParams> reft_params;
  nlohmann::json config;

  EvalReport evaluate_on(std::span<const BoolExample> examples, const ByteTokenizer& tok,
                         std::size_t max_new = 5) const {
    if (reft_config && reft_params) {
      return detail::evaluate_core(model, &*reft_config, &*reft_params, examples, tok, max_new,
                                   &std::cerr);
    }
    return evaluate(model, examples, tok, max_new);
  }
};

inline void save_model_checkpoint(const std::string& path, const ModelWeights& model) {
  nlohmann::json cfg;
  cfg["kind"] = "model";
  cfg["model"] = model_config_json(model.config);
  std::vector<std::pair<std::string, Tensor>> tensors;
  for (const auto& [name, tensor] : model.entries()) tensors.emplace_back("model." + name, tensor);
  save_checkpoint(path, cfg, tensors);
}

inline void save_heft_checkpoint(const std::string& path, const HeftResult& result) {
  nlohmann::json cfg;
  cfg["kind"] = "heft";
  cfg["model"] = model_config_json(result.merged.config);
  cfg["reft"] = {{"layer", result.reft_config.layer},
                 {"low_rank_dimension", result.reft_config.low_rank_dimension},
                 {"component", "block_output"},
                 {"position_rule", "last_prompt"}};
  cfg["plan"] = {{"lora_epochs", result.lora_report.epochs_run},
                 {"reft_epochs", result.reft_report.epochs_run}};
  std::vector<std::pair<std::string, Tensor>> tensors;
  for (const auto& [name, tensor] : result.merged.entries()) {
    tensors.emplace_back("model." + name, tensor);
  }
  tensors.emplace_back("reft.R", result.reft_params.R);
  tensors.emplace_back("reft.W", result.reft_params.W);
  tensors.emplace_back("reft.b", result.reft_params.b);
  save_checkpoint(path, cfg, tensors);
}

inline ModelWeights model_from_checkpoint(const Checkpoint& ckpt) {
  const ModelConfig cfg = model_config_from_json(ckpt.config.at("model"));
  ModelWeights model;
  model.config = cfg;
  ModelWeights schema = init_model(cfg);  // canonical name order and shapes
  for (const auto& [name, tensor] : schema.entries()) {
    const Tensor& stored = ckpt.get("model." + name);
    if (stored.shape() != tensor.shape()) {
      throw std::runtime_error("checkpoint: tensor model." + name + " has shape " +
                               shape_str(stored.shape()) + ", expected " +
                               shape_str(tensor.shape()));
    }
    model.add(name, stored.clone());
  }
  return model;
}

inline LoadedArtifact load_artifact(const std::string& path) {
  const Checkpoint ckpt = load_checkpoint(path);
  LoadedArtifact art{model_from_checkpoint(ckpt), std::nullopt, std::nullopt, ckpt.config};
  if (ckpt.has("reft.R")) {
    ReftConfig rcfg;
    const auto& rj = ckpt.config.at("reft");
    rcfg.layer = rj.at("layer").get<std::size_t>();
    rcfg.low_rank_dimension = rj.at("low_rank_dimension").get<std::size_t>();
    rcfg.validate(art.model.config);
    LoreftParams params;
    params.R = ckpt.get("reft.R").clone();
    params.W = ckpt.get("reft.W").clone();
    params.b = ckpt.get("reft.b").clone();
    art.reft_config = rcfg;
    art.reft_params = std::move(params);
  }
  return art;
}

// ---- experiment runner --------------------------------------------------

struct DatasetSpec {
  std::string path;  // JSONL file when non-empty
  bool synthetic = false;
  std::uint64_t seed = 0;
  std::size_t n = 0;
  std::size_t n_entities = 0;
  std::size_t n_properties = 0;
  int chain = 2;

  static DatasetSpec from_json(const nlohmann::json& j) {
    DatasetSpec spec;
    if (j.contains("path")) {
      spec.path = j.at("path").get<std::string>();
      return spec;
    }
    if (!j.contains("synthetic")) {
      throw std::invalid_argument("dataset spec: need \"path\" or \"synthetic\"");
    }
    const auto& s = j.at("synthetic");
    spec.synthetic = true;
    spec.seed = s.at("seed").get<std::uint64_t>();
    spec.n = s.at("n").get<std::size_t>();
    spec.n_entities = s.at("n_entities").get<std::size_t>();
    spec.n_properties = s.at("n_properties").get<std::size_t>();
    spec.chain = s.value("chain", 2);
    return spec;
  }

  std::vector<BoolExample> load() const {
    if (!path.empty()) return load_boolq_jsonl(path);
    return synth_generate(seed, n, n_entities, n_properties, chain);
  }
};

struct PlanSpec {
  std::size_t lora_epochs = 0;
  std::size_t reft_epochs = 0;

  std::string label() const {
    return method_label(lora_epochs, reft_epochs) + "_" + std::to_string(lora_epochs) + "_" +
           std::to_string(reft_epochs);
  }
};

struct ExperimentConfig {
  ModelConfig model;
  std::uint64_t seed = 1;
  std::string out_dir = "runs";
  std::string base_checkpoint;  // optional pre-built base
  struct PretrainPhase {
    std::size_t epochs = 0;
    PretrainObjective objective = PretrainObjective::answer_span;
    TrainConfig train;
  };
  std::optional<DatasetSpec> pretrain_dataset;
  std::vector<PretrainPhase> pretrain_phases;
  DatasetSpec train_dataset;
  DatasetSpec eval_dataset;
  std::vector<PlanSpec> plans;
  LoraConfig lora;
  ReftConfig reft;
  bool reft_layer_auto = true;
  TrainConfig stage1_train;
  TrainConfig stage2_train;
  std::size_t max_new_tokens = 5;
};

inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base) {
  base.learning_rate = j.value("learning_rate", base.learning_rate);
  base.batch_size = j.value("batch_size", base.batch_size);
  base.grad_accum = j.value("grad_accum", base.grad_accum);
  base.weight_decay = j.value("weight_decay", base.weight_decay);
  return base;
}

inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  ExperimentConfig cfg;
  cfg.model = model_config_from_json(j.at("model"));
  cfg.seed = j.value("seed", std::uint64_t{1});
  cfg.out_dir = j.value("out_dir", std::string("runs"));
  cfg.base_checkpoint = j.value("base_checkpoint", std::string());
  if (j.contains("pretrain")) {
    const auto& p = j.at("pretrain");
    cfg.pretrain_dataset = DatasetSpec::from_json(p.at("dataset"));
    TrainConfig defaults;
    defaults.learning_rate = 1e-3;
    defaults.batch_size = 16;
    defaults = p.contains("train") ? train_config_from_json(p["train"], defaults) : defaults;
    auto parse_objective = [](const std::string& name) {
      if (name == "full") return PretrainObjective::full_sequence;
      if (name == "answer_only") return PretrainObjective::answer_only;
      if (name == "answer_span") return PretrainObjective::answer_span;
      throw std::invalid_argument("pretrain objective must be full, answer_span or answer_only");
    };
    if (p.contains("phases")) {
      for (const auto& ph : p.at("phases")) {
        ExperimentConfig::PretrainPhase phase;
        phase.epochs = ph.at("epochs").get<std::size_t>();
        phase.objective = parse_objective(ph.value("objective", std::string("answer_span")));
        phase.train = ph.contains("train") ? train_config_from_json(ph["train"], defaults)
                                           : defaults;
        cfg.pretrain_phases.push_back(phase);
      }
    } else {
      ExperimentConfig::PretrainPhase phase;
      phase.epochs = p.at("epochs").get<std::size_t>();
      phase.objective = parse_objective(p.value("objective", std::string("answer_span")));
      phase.train = defaults;
      cfg.pretrain_phases.push_back(phase);
    }
  }
  cfg.train_dataset = DatasetSpec::from_json(j.at("train_dataset"));
  cfg.eval_dataset = DatasetSpec::from_json(j.at("eval_dataset"));
  if (!j.contains("plans") || !j.at("plans").is_array() || j.at("plans").empty()) {
    throw std::invalid_argument("experiment config: no plans");
  }
  for (const auto& p : j.at("plans")) {
    cfg.plans.push_back(PlanSpec{p.value("lora_epochs", std::size_t{0}),
                                 p.value("reft_epochs", std::size_t{0})});
  }
  if (j.contains("lora")) {
    const auto& l = j["lora"];
    cfg.lora.r = l.value("r", cfg.lora.r);
    cfg.lora.alpha = l.value("alpha", cfg.lora.alpha);
    cfg.lora.dropout_p = l.value("dropout", cfg.lora.dropout_p);
  }
  if (j.contains("reft")) {
    const auto& r = j["reft"];
    cfg.reft.low_rank_dimension = r.value("low_rank_dimension", cfg.reft.low_rank_dimension);
    if (r.contains("layer")) {
      cfg.reft.layer = r.at("layer").get<std::size_t>();
      cfg.reft_layer_auto = false;
    }
  }
  TrainConfig s1;  // appendix stage-1 defaults
  s1.learning_rate = 2e-4;
  s1.batch_size = 1;
  s1.grad_accum = 32;
  cfg.stage1_train = j.contains("stage1_train") ? train_config_from_json(j["stage1_train"], s1) : s1;
  TrainConfig s2;  // appendix stage-2 defaults
  s2.learning_rate = 2e-4;
  s2.batch_size = 8;
  s2.grad_accum = 4;
  cfg.stage2_train = j.contains("stage2_train") ? train_config_from_json(j["stage2_train"], s2) : s2;
  cfg.max_new_tokens = j.value("max_new_tokens", std::size_t{5});
  return cfg;
}

struct ExperimentResult {
  std::vector<RunRecord> records;
  std::vector<std::string> failed;
  std::string comparison_csv;
  std::string plot_data;
  ModelWeights base;
};

// Executes every plan from the same pretrained base and seed. Plans whose
// results file already exists are loaded instead of re-run, so an interrupted
// grid resumes where it stopped; a failing plan is recorded and skipped.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, std::ostream* log = &std::cerr) {
  namespace fs = std::filesystem;
  if (cfg.plans.empty()) throw std::invalid_argument("experiment: no plans");
  fs::create_directories(cfg.out_dir);
  const ByteTokenizer tok;

  const auto train_examples = cfg.train_dataset.load();
  const auto eval_examples = cfg.eval_dataset.load();
  const auto train_records = build_supervised_records(train_examples, tok, cfg.model.max_seq);

  // base model: explicit checkpoint > cached pretrain > fresh pretrain > raw init
  ModelWeights base;
  const fs::path base_path = fs::path(cfg.out_dir) / "base.heft";
  if (!cfg.base_checkpoint.empty()) {
    base = load_artifact(cfg.base_checkpoint).model;
  } else if (cfg.pretrain_dataset && !cfg.pretrain_phases.empty()) {
    if (fs::exists(base_path)) {
      if (log) *log << "experiment: reusing pretrained base " << base_path.string() << "\n";
      base = load_artifact(base_path.string()).model;
    } else {
      base = init_model(cfg.model);
      const auto pretrain_examples = cfg.pretrain_dataset->load();
      const auto pretrain_records =
          build_supervised_records(pretrain_examples, tok, cfg.model.max_seq);
      for (std::size_t i = 0; i < cfg.pretrain_phases.size(); ++i) {
        const auto& phase = cfg.pretrain_phases[i];
        PretrainTarget target(&base, ByteTokenizer::eos_id, phase.objective);
        TrainConfig tc = phase.train;
        tc.epochs = phase.epochs;
        tc.seed = Rng::mix(cfg.seed, 0x9E7 + i);
        StageReport rep = train_stage(target, pretrain_records, tc, StageKind::pretrain);
        if (log) {
          *log << "experiment: pretrain phase " << i + 1 << "/" << cfg.pretrain_phases.size()
               << ": " << rep.epochs_run << " epochs, final loss " << rep.final_mean_loss << ", "
               << rep.wall_seconds << "s\n";
        }
      }
      save_model_checkpoint(base_path.string(), base);
    }
  } else {
    base = init_model(cfg.model);
  }

  ExperimentResult result;
  result.base = base.clone();
  for (const auto& plan_spec : cfg.plans) {
    const std::string label = plan_spec.label();
    const fs::path results_path = fs::path(cfg.out_dir) / (label + ".json");
    try {
      if (fs::exists(results_path)) {
        if (log) *log << "experiment: reusing results for " << label << "\n";
        std::ifstream in(results_path);
        nlohmann::json j;
        in >> j;
        result.records.push_back(run_record_from_json(j));
        continue;
      }

      HeftPlan plan;
      plan.lora_epochs = plan_spec.lora_epochs;
      plan.reft_epochs = plan_spec.reft_epochs;
      plan.lora = cfg.lora;
      plan.reft = cfg.reft;
      if (cfg.reft_layer_auto) plan.reft.layer = select_reft_layer(cfg.model.n_layers);
      plan.lora_train = cfg.stage1_train;
      plan.lora_train.seed = Rng::mix(cfg.seed, 0x57A6E1);
      plan.reft_train = cfg.stage2_train;
      plan.reft_train.seed = Rng::mix(cfg.seed, 0x57A6E2);
      plan.init_seed = cfg.seed;

      HeftResult heft = run_heft(base, plan, train_records, ByteTokenizer::eos_id);
      ReftModel reft = heft.reft_model();

      RunRecord rec;
      rec.method = method_label(plan.lora_epochs, plan.reft_epochs);
      rec.lora_epochs = plan.lora_epochs;
      rec.reft_epochs = plan.reft_epochs;
      rec.lora_report = heft.lora_report;
      rec.reft_report = heft.reft_report;
      rec.eval = evaluate(reft, eval_examples, tok, cfg.max_new_tokens,
                          log);
      rec.eval.lora_epochs = plan.lora_epochs;
      rec.eval.reft_epochs = plan.reft_epochs;
      rec.seed = cfg.seed;
      rec.created = iso_timestamp_utc();

      save_heft_checkpoint((fs::path(cfg.out_dir) / (label + ".heft")).string(), heft);
      write_results_file(results_path.string(), rec);
      result.records.push_back(std::move(rec));
      if (log) {
        *log << "experiment: " << label << " accuracy "
             << format_accuracy(result.records.back().eval.accuracy_percent) << "\n";
      }
    } catch (const std::exception& e) {
      result.failed.push_back(label);
      std::ofstream mark(fs::path(cfg.out_dir) / (label + ".failed.txt"));
      mark << e.what() << "\n";
      if (log) *log << "experiment: plan " << label << " failed: " << e.what() << "\n";
    }
  }

  if (result.records.empty()) {
    throw std::runtime_error("experiment: every plan failed");
  }

  result.comparison_csv = emit_comparison_csv(result.records);
  std::vector<RunRecord> plotted;
  for (const auto& rec : result.records) {
    if (rec.method != "base") plotted.push_back(rec);
  }
  result.plot_data = emit_plot_data(plotted.empty() ? result.records : plotted);
  {
    std::ofstream csv(fs::path(cfg.out_dir) / "comparison.csv");
    csv << result.comparison_csv;
    std::ofstream plot(fs::path(cfg.out_dir) / "plot_data.dat");
    plot << result.plot_data;
  }
  return result;
}

}  // namespace heft
