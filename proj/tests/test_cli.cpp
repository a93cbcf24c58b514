#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "fixq/fixq.hpp"

using namespace fixq;

namespace {

namespace fs = std::filesystem;

struct CliResult {
  int exit_code;
};

// Runs the installed binary with output discarded; we assert on exit codes
// and on the files the command writes.
CliResult run_cli(const std::string& args) {
  const std::string cmd = std::string(FIXQ_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  REQUIRE(status != -1);
  return {WEXITSTATUS(status)};
}

std::string work_file(const std::string& name) {
  static const fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / "fixq_cli_tests";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return (dir / name).string();
}

std::vector<char> read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("cli usage errors exit with code 1") {
  CHECK(run_cli("").exit_code == 1);
  CHECK(run_cli("frobnicate").exit_code == 1);
  CHECK(run_cli("allocate --stats x.json --out y.json --threshold 1.5").exit_code == 1);
  CHECK(run_cli("finetune --data synth:n=8,seed=1").exit_code == 1);  // missing --out
  CHECK(run_cli("--help").exit_code == 0);
}

TEST_CASE("cli data errors exit with code 2") {
  CHECK(run_cli("profile --model /nonexistent.fxqm --data synth:n=4,seed=1 --out " +
                work_file("x.json"))
            .exit_code == 2);
  CHECK(run_cli("giga1net --out /nonexistent-dir/net.txt").exit_code == 2);
}

TEST_CASE("giga1net subcommand writes the builder's descriptor byte-for-byte") {
  const std::string out = work_file("giga.net");
  CHECK(run_cli("giga1net --out " + out).exit_code == 0);
  std::ifstream in(out, std::ios::binary);
  REQUIRE(in);
  std::stringstream ss;
  ss << in.rdbuf();
  CHECK(ss.str() == emit_descriptor(build_giga1net()));
}

TEST_CASE("cli pipeline matches library calls byte-for-byte") {
  // fixture: a quantized model saved by the library
  const NetDescriptor net = build_pattern_net(true);
  Model model = init_model(net, 321);
  const std::string model_path = work_file("seed.fxqm");
  save_model(model, model_path);

  const std::string data_spec = "synth:n=32,seed=5";
  const Dataset data = load_data_source(data_spec);

  SECTION("profile") {
    const std::string out = work_file("stats.json");
    REQUIRE(run_cli("profile --model " + model_path + " --data " + data_spec + " --out " + out)
                .exit_code == 0);
    const std::string lib_out = work_file("stats_lib.json");
    save_range_stats(measure_ranges(model, data.images), lib_out);
    CHECK(read_bytes(out) == read_bytes(lib_out));

    // identical reruns produce identical files
    const std::string out2 = work_file("stats2.json");
    REQUIRE(run_cli("profile --model " + model_path + " --data " + data_spec + " --out " + out2)
                .exit_code == 0);
    CHECK(read_bytes(out) == read_bytes(out2));
  }

  SECTION("allocate") {
    const std::string stats_path = work_file("alloc_stats.json");
    save_range_stats(measure_ranges(model, data.images), stats_path);
    const std::string out = work_file("alloc.json");
    REQUIRE(run_cli("allocate --stats " + stats_path + " --bits 16 --threshold 0.01 --out " + out)
                .exit_code == 0);
    const std::string lib_out = work_file("alloc_lib.json");
    save_allocation(allocate_bits(load_range_stats(stats_path), 16, 0.01), lib_out);
    CHECK(read_bytes(out) == read_bytes(lib_out));
  }

  SECTION("finetune with --epochs 0 copies the input model") {
    const std::string out = work_file("trained.fxqm");
    REQUIRE(run_cli("finetune --model " + model_path + " --data " + data_spec +
                    " --epochs 0 --seed 9 --out " + out)
                .exit_code == 0);
    const Model back = load_model(out);
    for (std::size_t j = 0; j < model.params.size(); ++j) {
      CHECK(back.params[j].weights == model.params[j].weights);
      CHECK(back.params[j].bias == model.params[j].bias);
    }
    CHECK(load_history(out + ".history.jsonl").empty());
  }

  SECTION("finetune deterministic re-run produces identical files") {
    const std::string out_a = work_file("ft_a.fxqm");
    const std::string out_b = work_file("ft_b.fxqm");
    const std::string args = " --data synth:n=48,seed=6 --epochs 2 --batch 8 --seed 4 "
                             "--scheme stoch --lr 0.05 --lr-divisor 10 --out ";
    REQUIRE(run_cli("finetune --model " + model_path + args + out_a).exit_code == 0);
    REQUIRE(run_cli("finetune --model " + model_path + args + out_b).exit_code == 0);
    CHECK(read_bytes(out_a) == read_bytes(out_b));
    CHECK(read_bytes(out_a + ".history.jsonl") == read_bytes(out_b + ".history.jsonl"));
  }

  SECTION("report writes parseable schemas for an untrained model") {
    const std::string out = work_file("report");
    REQUIRE(run_cli("report --model " + model_path + " --data " + data_spec +
                    " --mode one-shot-quantized --out " + out)
                .exit_code == 0);
    const SparsityReport r = load_sparsity_report(out + ".sparsity.json");
    CHECK(r.mode == ReportMode::kOneShotQuantized);
    REQUIRE(!r.layers.empty());
    for (const SparsityLayer& l : r.layers) {
      CHECK(l.sparsity >= 0.0);
      CHECK(l.sparsity <= 1.0);
    }
    const OneShotStudy s = load_one_shot_study(out + ".oneshot.json");
    CHECK(s.representable_8bit >= s.representable_4bit);
  }

  SECTION("export decodes back to the model's quantized tensors") {
    const std::string out = work_file("model.fxqx");
    REQUIRE(run_cli("export --model " + model_path + " --out " + out).exit_code == 0);
    const AcceleratorExport decoded = read_accelerator(out);
    REQUIRE(decoded.layers.size() == model.params.size());
    for (std::size_t j = 0; j < model.params.size(); ++j)
      CHECK(decoded.layers[j].weights == model.params[j].quantized_weights);
  }
}

TEST_CASE("cli export of a float model is a data error (exit 2)") {
  const NetDescriptor net = build_pattern_net(false);
  Model model = init_model(net, 8);
  const std::string model_path = work_file("float.fxqm");
  save_model(model, model_path);
  const std::string alloc_path = work_file("float_alloc.json");
  BitAllocation alloc;
  alloc.total_bits = 16;
  alloc.loss_threshold = 0;
  for (std::size_t i : weighted_layers(net))
    alloc.layers.push_back({net.layers[i].name, FixedPointFormat(2, 14), FixedPointFormat(8, 8)});
  save_allocation(alloc, alloc_path);
  CHECK(run_cli("export --model " + model_path + " --alloc " + alloc_path + " --out " +
                work_file("bad.fxqx"))
            .exit_code == 2);
}
