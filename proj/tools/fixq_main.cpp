// fixq command-line front end. Every subcommand is a thin wrapper over the
// library: given the same inputs and seed, the files it writes are
// byte-identical to the corresponding library calls.
//
// Exit codes: 0 success, 1 usage error, 2 data/validation error,
// 3 numerical failure.

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "fixq/fixq.hpp"

namespace {

struct RunConfig {
  std::string net_path;
  std::string model_path;
  std::string data_source;
  std::string stats_path;
  std::string alloc_path;
  std::string out_path;
  std::string history_path;
  std::string init = "pretrained";
  std::string report_mode = "fine-tuned";
  int bits = 16;
  double threshold = 0.01;
  std::string scheme = "det";
  std::uint64_t seed = 1;
  double lr = 0.05;
  double lr_divisor = 10;
  int epochs = 10;
  int batch = 16;
  double eval_fraction = 0.25;
  double momentum = 0.0;
};

fixq::NetDescriptor resolve_net(const RunConfig& cfg, const fixq::Model* model) {
  if (!cfg.net_path.empty()) return fixq::load_descriptor(cfg.net_path);
  if (model) return model->net;
  throw fixq::validation_error("no network: pass --net or --model");
}

int cmd_giga1net(const RunConfig& cfg) {
  const fixq::NetDescriptor net = fixq::build_giga1net();
  if (!cfg.out_path.empty()) fixq::save_descriptor(net, cfg.out_path);
  std::cout << "net: " << net.name << "\n"
            << "layers: " << net.layers.size() << " (" << fixq::weighted_layers(net).size()
            << " weighted)\n"
            << "ops/frame: " << fixq::count_ops(net) << "\n"
            << "params: " << fixq::count_params(net) << "\n";
  if (!cfg.out_path.empty()) std::cout << "descriptor written to " << cfg.out_path << "\n";
  return 0;
}

int cmd_profile(const RunConfig& cfg) {
  const fixq::Model model = fixq::load_model(cfg.model_path);
  const fixq::Dataset data = fixq::load_data_source(cfg.data_source);
  const fixq::RangeStats stats = fixq::measure_ranges(model, data.images);
  fixq::save_range_stats(stats, cfg.out_path);
  std::cout << "profiled " << stats.samples << " samples over " << stats.layers.size()
            << " layers -> " << cfg.out_path << "\n";
  return 0;
}

int cmd_allocate(const RunConfig& cfg) {
  const fixq::RangeStats stats = fixq::load_range_stats(cfg.stats_path);
  const fixq::BitAllocation alloc =
      fixq::allocate_bits(stats, cfg.bits, static_cast<fixq::real>(cfg.threshold));
  fixq::save_allocation(alloc, cfg.out_path);
  for (const fixq::LayerFormats& l : alloc.layers)
    std::cout << l.name << ": weights " << l.weight_fmt.str() << ", activations "
              << l.act_fmt.str() << "\n";
  std::cout << "allocation written to " << cfg.out_path << "\n";
  return 0;
}

int cmd_finetune(const RunConfig& cfg) {
  fixq::NetDescriptor net;
  std::optional<fixq::Model> init;
  if (!cfg.model_path.empty()) {
    fixq::Model pretrained = fixq::load_model(cfg.model_path);
    net = resolve_net(cfg, &pretrained);
    init = std::move(pretrained);
  } else {
    net = resolve_net(cfg, nullptr);
  }
  if (cfg.init == "random") init.reset();
  if (!cfg.alloc_path.empty())
    fixq::apply_allocation(net, fixq::load_allocation(cfg.alloc_path));

  const fixq::Dataset all = fixq::load_data_source(cfg.data_source);
  const auto [train, eval] = fixq::split_dataset(all, static_cast<fixq::real>(cfg.eval_fraction));

  fixq::TrainConfig tc;
  tc.learning_rate = static_cast<fixq::real>(cfg.lr);
  tc.lr_divisor_for_lp = static_cast<fixq::real>(cfg.lr_divisor);
  tc.momentum = static_cast<fixq::real>(cfg.momentum);
  tc.batch_size = cfg.batch;
  tc.epochs = cfg.epochs;
  tc.seed = cfg.seed;
  tc.scheme = fixq::parse_rounding_scheme(cfg.scheme);

  fixq::TrainResult result = fixq::finetune(net, init, train, eval, tc);
  result.model.provenance = "fixq finetune seed=" + std::to_string(cfg.seed);
  fixq::save_model(result.model, cfg.out_path);
  const std::string history_path =
      cfg.history_path.empty() ? cfg.out_path + ".history.jsonl" : cfg.history_path;
  fixq::save_history(result.history, history_path);

  if (result.history.empty()) {
    std::cout << "0 epochs trained; initial model copied to " << cfg.out_path << "\n";
  } else {
    const fixq::EpochRecord& last = result.history.back();
    std::cout << "trained " << result.history.size() << " epochs; final accuracy "
              << last.accuracy << ", mean sparsity " << last.mean_sparsity << "\n";
  }
  std::cout << "model -> " << cfg.out_path << "\nhistory -> " << history_path << "\n";
  return 0;
}

int cmd_report(const RunConfig& cfg) {
  const fixq::Model model = fixq::load_model(cfg.model_path);
  const fixq::Dataset data = fixq::load_data_source(cfg.data_source);

  const fixq::ReportMode mode = fixq::parse_report_mode(cfg.report_mode);
  const fixq::SparsityReport report = fixq::sparsity_report(model, data.images, mode);
  fixq::save_sparsity_report(report, cfg.out_path + ".sparsity.json");

  fixq::BitAllocation alloc;
  if (!cfg.alloc_path.empty()) {
    alloc = fixq::load_allocation(cfg.alloc_path);
  } else {
    // fall back to the formats the model already carries
    const auto widx = fixq::weighted_layers(model.net);
    alloc.total_bits = model.net.layers[widx.front()].quant.weight_fmt.total_bits();
    alloc.loss_threshold = 0;
    for (std::size_t i : widx)
      alloc.layers.push_back({model.net.layers[i].name, model.net.layers[i].quant.weight_fmt,
                              model.net.layers[i].quant.act_fmt});
  }
  const fixq::OneShotStudy study = fixq::one_shot_study(model, data, alloc);
  fixq::save_one_shot_study(study, cfg.out_path + ".oneshot.json");

  std::cout << "mean sparsity (" << fixq::to_string(report.mode) << "): " << report.mean_sparsity
            << "\n"
            << "one-shot accuracy: float " << study.accuracy_float << ", weights-only "
            << study.accuracy_weights_only << ", weights+acts " << study.accuracy_weights_and_acts
            << "\n"
            << "weights representable in 4/8 bits: " << study.representable_4bit << " / "
            << study.representable_8bit << "\n"
            << "reports -> " << cfg.out_path << ".sparsity.json, " << cfg.out_path
            << ".oneshot.json\n";
  return 0;
}

int cmd_export(const RunConfig& cfg) {
  const fixq::Model model = fixq::load_model(cfg.model_path);
  fixq::BitAllocation alloc;
  if (!cfg.alloc_path.empty()) {
    alloc = fixq::load_allocation(cfg.alloc_path);
  } else {
    const auto widx = fixq::weighted_layers(model.net);
    alloc.total_bits = model.net.layers[widx.front()].quant.weight_fmt.total_bits();
    alloc.loss_threshold = 0;
    for (std::size_t i : widx)
      alloc.layers.push_back({model.net.layers[i].name, model.net.layers[i].quant.weight_fmt,
                              model.net.layers[i].quant.act_fmt});
  }
  fixq::export_accelerator(model, alloc, cfg.out_path);
  const fixq::ExportInfo info = fixq::inspect_export(cfg.out_path);
  std::cout << "exported " << info.record_count << " layers, " << info.code_payload_bytes
            << " code bytes -> " << cfg.out_path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fixed-point quantization toolkit for convolutional networks"};
  app.require_subcommand(1);
  RunConfig cfg;

  const auto add_common = [&](CLI::App* sub) {
    sub->add_option("--seed", cfg.seed, "random seed");
    return sub;
  };

  CLI::App* giga = add_common(app.add_subcommand(
      "giga1net", "emit the 13-layer 1 GOp/frame benchmark descriptor and its op/param counts"));
  giga->add_option("--out", cfg.out_path, "descriptor output path");

  CLI::App* profile = add_common(
      app.add_subcommand("profile", "measure per-layer weight/activation dynamic ranges"));
  profile->add_option("--model", cfg.model_path, "model container (.fxqm)")->required();
  profile->add_option("--data", cfg.data_source, "dataset file or synth:n=..,seed=..")->required();
  profile->add_option("--out", cfg.out_path, "range stats output (JSON)")->required();
  profile->add_option("--net", cfg.net_path, "optional descriptor override");

  CLI::App* allocate = add_common(app.add_subcommand(
      "allocate", "distribute a fixed bit budget per layer from measured ranges"));
  allocate->add_option("--stats", cfg.stats_path, "range stats produced by profile")->required();
  allocate->add_option("--bits", cfg.bits, "total bits per value")
      ->check(CLI::Range(2, 32))
      ->capture_default_str();
  allocate->add_option("--threshold", cfg.threshold, "tolerated overflow fraction")
      ->check(CLI::Range(0.0, 0.999999))
      ->capture_default_str();
  allocate->add_option("--out", cfg.out_path, "allocation output (JSON)")->required();

  CLI::App* finetune = add_common(app.add_subcommand(
      "finetune", "train with quantized forward passes and full-precision gradients"));
  finetune->add_option("--net", cfg.net_path, "network descriptor");
  finetune->add_option("--model", cfg.model_path, "pretrained model container");
  finetune->add_option("--init", cfg.init, "pretrained|random")
      ->check(CLI::IsMember({"pretrained", "random"}))
      ->capture_default_str();
  finetune->add_option("--alloc", cfg.alloc_path, "bit allocation to apply before training");
  finetune->add_option("--data", cfg.data_source, "dataset file or synth: spec")->required();
  finetune->add_option("--eval-fraction", cfg.eval_fraction, "held-out fraction")
      ->check(CLI::Range(0.01, 0.9))
      ->capture_default_str();
  finetune->add_option("--scheme", cfg.scheme, "rounding scheme: det|stoch")
      ->capture_default_str();
  finetune->add_option("--lr", cfg.lr, "base learning rate")->capture_default_str();
  finetune->add_option("--lr-divisor", cfg.lr_divisor, "low-precision learning-rate divisor")
      ->check(CLI::Range(1.0, 1e6))
      ->capture_default_str();
  finetune->add_option("--momentum", cfg.momentum, "SGD momentum")->capture_default_str();
  finetune->add_option("--epochs", cfg.epochs, "epoch budget")->capture_default_str();
  finetune->add_option("--batch", cfg.batch, "batch size")->capture_default_str();
  finetune->add_option("--out", cfg.out_path, "trained model output")->required();
  finetune->add_option("--history", cfg.history_path,
                       "history output (default: <out>.history.jsonl)");

  CLI::App* report = add_common(
      app.add_subcommand("report", "sparsity report and one-shot quantization study"));
  report->add_option("--model", cfg.model_path, "model container")->required();
  report->add_option("--data", cfg.data_source, "dataset file or synth: spec")->required();
  report->add_option("--alloc", cfg.alloc_path, "allocation for the one-shot study");
  report->add_option("--mode", cfg.report_mode, "sparsity tag: float|one-shot-quantized|fine-tuned")
      ->check(CLI::IsMember({"float", "one-shot-quantized", "fine-tuned"}))
      ->capture_default_str();
  report->add_option("--out", cfg.out_path, "output path prefix")->required();

  CLI::App* exp = add_common(app.add_subcommand(
      "export", "write quantized weights as 16-bit two's-complement codes"));
  exp->add_option("--model", cfg.model_path, "quantized model container")->required();
  exp->add_option("--alloc", cfg.alloc_path, "allocation the model was quantized under");
  exp->add_option("--out", cfg.out_path, "export output (.fxqx)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (giga->parsed()) return cmd_giga1net(cfg);
    if (profile->parsed()) return cmd_profile(cfg);
    if (allocate->parsed()) return cmd_allocate(cfg);
    if (finetune->parsed()) return cmd_finetune(cfg);
    if (report->parsed()) return cmd_report(cfg);
    if (exp->parsed()) return cmd_export(cfg);
  } catch (const fixq::validation_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const fixq::numeric_error& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
