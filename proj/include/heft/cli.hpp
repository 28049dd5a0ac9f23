#pragma once

#include <cstdint>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "heft/harness.hpp"

namespace heft {

namespace cli_detail {

struct ModelFlags {
  std::size_t layers = 4;
  std::size_t d_model = 128;
  std::size_t heads = 4;
  std::size_t d_ff = 256;
  std::size_t vocab = ByteTokenizer::vocab_size;
  std::size_t max_seq = 256;
  std::uint64_t seed = 1;

  ModelConfig config() const {
    ModelConfig cfg;
    cfg.n_layers = layers;
    cfg.d_model = d_model;
    cfg.n_heads = heads;
    cfg.d_ff = d_ff;
    cfg.vocab_size = vocab;
    cfg.max_seq = max_seq;
    cfg.seed = seed;
    return cfg;
  }

  void attach(CLI::App* cmd) {
    cmd->add_option("--layers", layers, "Transformer layers");
    cmd->add_option("--d-model", d_model, "Model width");
    cmd->add_option("--heads", heads, "Attention heads");
    cmd->add_option("--d-ff", d_ff, "Feed-forward width");
    cmd->add_option("--vocab", vocab, "Vocabulary size");
    cmd->add_option("--max-seq", max_seq, "Maximum sequence length");
    cmd->add_option("--model-seed", seed, "Base model init seed");
  }
};

inline void print_stage(const StageReport& rep) {
  std::cout << "stage " << to_string(rep.stage) << ": " << rep.epochs_run << " epochs, "
            << rep.optimizer_steps << " steps, " << rep.trainable_param_count
            << " trainable params, final loss " << rep.final_mean_loss << ", "
            << rep.wall_seconds << "s\n";
}

inline void print_eval(const EvalReport& rep) {
  std::cout << "accuracy " << format_accuracy(rep.accuracy_percent) << " ("
            << rep.correct_predictions << "/" << rep.num_validation_samples << ", "
            << rep.unknown_predictions << " unknown), " << rep.wall_seconds << "s\n";
}

}  // namespace cli_detail

inline int cli_dispatch(int argc, const char* const* argv) {
  CLI::App app{"Desk-scale hierarchical fine-tuning lab: LoRA, LoReFT and their composition on a "
               "from-scratch mini transformer"};
  app.require_subcommand(1);

  // gen-data ---------------------------------------------------------------
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic yes/no dataset (JSONL)");
  std::uint64_t gen_seed = 1;
  std::size_t gen_n = 1024, gen_entities = 192, gen_properties = 32;
  int gen_chain = 2;
  std::string gen_out;
  gen->add_option("--seed", gen_seed, "World seed");
  gen->add_option("--n", gen_n, "Number of examples (even)");
  gen->add_option("--entities", gen_entities, "Entity pool size");
  gen->add_option("--properties", gen_properties, "Property pool size");
  gen->add_option("--chain", gen_chain, "1 = direct fact, 2 = fact+rule composition")
      ->check(CLI::Range(1, 2));
  gen->add_option("--out", gen_out, "Output JSONL path")->required();

  // train ------------------------------------------------------------------
  auto* train = app.add_subcommand("train", "Train: pretrain, lora, reft or the heft pipeline");
  std::string method;
  train->add_option("--method", method, "pretrain | lora | reft | heft")
      ->required()
      ->check(CLI::IsMember({"pretrain", "lora", "reft", "heft"}));
  std::string train_data, train_eval_data, base_ckpt, train_out, train_results;
  train->add_option("--data", train_data, "Training JSONL")->required();
  train->add_option("--eval-data", train_eval_data, "Evaluation JSONL (defaults to --data)");
  train->add_option("--base-checkpoint", base_ckpt, "Start from this base model checkpoint");
  train->add_option("--out", train_out, "Checkpoint output path");
  train->add_option("--results", train_results, "Results JSON path");
  std::size_t lora_epochs = 3, reft_epochs = 3, pre_epochs = 20;
  train->add_option("--lora-epochs", lora_epochs, "Stage-1 epochs");
  train->add_option("--reft-epochs", reft_epochs, "Stage-2 epochs");
  train->add_option("--epochs", pre_epochs, "Pretraining epochs (method pretrain)");
  std::size_t rank = 8, reft_dim = 4;
  double alpha = 32.0, dropout = 0.05, lr = 2e-4;
  long long reft_layer = -1;
  std::uint64_t seed = 0;
  train->add_option("--rank", rank, "LoRA rank r");
  train->add_option("--alpha", alpha, "LoRA scaling alpha");
  train->add_option("--dropout", dropout, "LoRA dropout");
  train->add_option("--reft-dim", reft_dim, "Intervention low-rank dimension");
  train->add_option("--reft-layer", reft_layer, "Intervention layer (-1 = relative depth rule)");
  train->add_option("--lr", lr, "Learning rate");
  train->add_option("--seed", seed, "Run seed");
  std::size_t lora_batch = 1, lora_accum = 32, reft_batch = 8, reft_accum = 4, pre_batch = 16;
  train->add_option("--lora-batch", lora_batch, "Stage-1 micro-batch size");
  train->add_option("--lora-accum", lora_accum, "Stage-1 gradient accumulation");
  train->add_option("--reft-batch", reft_batch, "Stage-2 micro-batch size");
  train->add_option("--reft-accum", reft_accum, "Stage-2 gradient accumulation");
  train->add_option("--pretrain-batch", pre_batch, "Pretraining batch size");
  std::string pre_objective = "answer_span";
  train->add_option("--pretrain-objective", pre_objective,
                    "Pretraining supervision: full | answer_span | answer_only")
      ->check(CLI::IsMember({"full", "answer_span", "answer_only"}));
  cli_detail::ModelFlags model_flags;
  model_flags.attach(train);

  // eval -------------------------------------------------------------------
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  std::string eval_ckpt, eval_data, eval_results;
  std::size_t max_new = 5;
  eval_cmd->add_option("--checkpoint", eval_ckpt, "Model or heft checkpoint")->required();
  eval_cmd->add_option("--data", eval_data, "Evaluation JSONL")->required();
  eval_cmd->add_option("--results", eval_results, "Results JSON path");
  eval_cmd->add_option("--max-new", max_new, "Greedy decoding budget");

  // experiment ---------------------------------------------------------------
  auto* exp = app.add_subcommand("experiment", "Run a plan grid from a JSON config");
  std::string exp_config, exp_out_dir;
  exp->add_option("--config", exp_config, "Experiment config JSON")->required();
  exp->add_option("--out-dir", exp_out_dir, "Override the config's output directory");

  // inspect ------------------------------------------------------------------
  auto* inspect = app.add_subcommand("inspect", "Print a checkpoint's config and tensor table");
  std::string inspect_ckpt;
  inspect->add_option("--checkpoint", inspect_ckpt, "Checkpoint path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    const ByteTokenizer tok;

    if (*gen) {
      auto examples = synth_generate(gen_seed, gen_n, gen_entities, gen_properties, gen_chain);
      save_boolq_jsonl(gen_out, examples);
      std::size_t yes = 0;
      for (const auto& ex : examples) yes += ex.answer ? 1 : 0;
      std::cout << "wrote " << examples.size() << " examples (" << yes << " yes) to " << gen_out
                << "\n";
      return 0;
    }

    if (*train) {
      const auto examples = load_boolq_jsonl(train_data);
      const auto eval_examples =
          train_eval_data.empty() ? examples : load_boolq_jsonl(train_eval_data);

      ModelWeights base;
      if (!base_ckpt.empty()) {
        base = load_artifact(base_ckpt).model;
      } else {
        base = init_model(model_flags.config());
      }
      const auto records = build_supervised_records(examples, tok, base.config.max_seq);

      if (method == "pretrain") {
        const PretrainObjective objective =
            pre_objective == "full" ? PretrainObjective::full_sequence
            : pre_objective == "answer_only" ? PretrainObjective::answer_only
                                             : PretrainObjective::answer_span;
        PretrainTarget target(&base, ByteTokenizer::eos_id, objective);
        TrainConfig tc;
        tc.learning_rate = lr;
        tc.epochs = pre_epochs;
        tc.batch_size = pre_batch;
        tc.seed = seed;
        StageReport rep = train_stage(target, records, tc, StageKind::pretrain);
        cli_detail::print_stage(rep);
        const std::string out = train_out.empty() ? "pretrained.heft" : train_out;
        save_model_checkpoint(out, base);
        std::cout << "saved " << out << "\n";
        if (!train_eval_data.empty()) {
          cli_detail::print_eval(evaluate(base, eval_examples, tok, max_new));
        }
        return 0;
      }

      HeftPlan plan;
      plan.lora_epochs = method == "reft" ? 0 : lora_epochs;
      plan.reft_epochs = method == "lora" ? 0 : reft_epochs;
      plan.lora.r = rank;
      plan.lora.alpha = alpha;
      plan.lora.dropout_p = dropout;
      plan.reft.low_rank_dimension = reft_dim;
      plan.reft.layer = reft_layer < 0 ? select_reft_layer(base.config.n_layers)
                                       : static_cast<std::size_t>(reft_layer);
      plan.lora_train.learning_rate = lr;
      plan.lora_train.batch_size = lora_batch;
      plan.lora_train.grad_accum = lora_accum;
      plan.lora_train.seed = Rng::mix(seed, 0x57A6E1);
      plan.reft_train.learning_rate = lr;
      plan.reft_train.batch_size = reft_batch;
      plan.reft_train.grad_accum = reft_accum;
      plan.reft_train.seed = Rng::mix(seed, 0x57A6E2);
      plan.init_seed = seed;

      HeftResult result = run_heft(base, plan, records, ByteTokenizer::eos_id);
      cli_detail::print_stage(result.lora_report);
      cli_detail::print_stage(result.reft_report);

      ReftModel reft = result.reft_model();
      RunRecord rec;
      rec.method = method_label(plan.lora_epochs, plan.reft_epochs);
      rec.lora_epochs = plan.lora_epochs;
      rec.reft_epochs = plan.reft_epochs;
      rec.lora_report = result.lora_report;
      rec.reft_report = result.reft_report;
      rec.eval = evaluate(reft, eval_examples, tok, max_new);
      rec.eval.lora_epochs = plan.lora_epochs;
      rec.eval.reft_epochs = plan.reft_epochs;
      rec.seed = seed;
      rec.created = iso_timestamp_utc();
      cli_detail::print_eval(rec.eval);

      const std::string out = train_out.empty() ? rec.method + ".heft" : train_out;
      save_heft_checkpoint(out, result);
      std::cout << "saved " << out << "\n";
      const std::string results_path =
          train_results.empty() ? "evaluation_results.json" : train_results;
      write_results_file(results_path, rec);
      std::cout << "results -> " << results_path << "\n";
      return 0;
    }

    if (*eval_cmd) {
      const LoadedArtifact artifact = load_artifact(eval_ckpt);
      const auto examples = load_boolq_jsonl(eval_data);
      RunRecord rec;
      rec.eval = artifact.evaluate_on(examples, tok, max_new);
      rec.lora_epochs = artifact.config.value("plan", nlohmann::json::object())
                            .value("lora_epochs", std::size_t{0});
      rec.reft_epochs = artifact.config.value("plan", nlohmann::json::object())
                            .value("reft_epochs", std::size_t{0});
      rec.eval.lora_epochs = rec.lora_epochs;
      rec.eval.reft_epochs = rec.reft_epochs;
      rec.method = method_label(rec.lora_epochs, rec.reft_epochs);
      rec.created = iso_timestamp_utc();
      cli_detail::print_eval(rec.eval);
      if (!eval_results.empty()) {
        write_results_file(eval_results, rec);
        std::cout << "results -> " << eval_results << "\n";
      }
      return 0;
    }

    if (*exp) {
      std::ifstream in(exp_config);
      if (!in) throw std::runtime_error("cannot open config: " + exp_config);
      nlohmann::json j;
      in >> j;
      ExperimentConfig cfg = experiment_config_from_json(j);
      if (!exp_out_dir.empty()) cfg.out_dir = exp_out_dir;
      ExperimentResult result = run_experiment(cfg, &std::cerr);
      std::cout << result.comparison_csv;
      if (!result.failed.empty()) {
        std::cerr << result.failed.size() << " plan(s) failed\n";
        return 1;
      }
      return 0;
    }

    if (*inspect) {
      Checkpoint ckpt = load_checkpoint(inspect_ckpt);
      std::cout << "config: " << ckpt.config.dump(2) << "\n";
      std::cout << "tensors: " << ckpt.tensors.size() << "\n";
      for (const auto& [name, tensor] : ckpt.tensors) {
        std::cout << "  " << name << "  " << shape_str(tensor.shape()) << "  " << tensor.size()
                  << "\n";
      }
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace heft
