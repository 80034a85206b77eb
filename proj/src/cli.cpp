#include "esf/cli.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "esf/data.hpp"
#include "esf/error.hpp"
#include "esf/gradcheck.hpp"
#include "esf/metrics.hpp"
#include "esf/model.hpp"
#include "esf/train.hpp"

namespace esf::cli {
namespace fs = std::filesystem;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
  if (!f) throw IoError("failed writing " + path.string());
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": malformed JSON: " + e.what());
  }
}

struct GenToyArgs {
  std::string out;
  std::size_t n = 200, test_n = 0, size = 64;
  std::uint64_t seed = 0;
};

struct TrainArgs {
  std::string data, config, out, trace;
  std::optional<std::uint64_t> seed;
};

struct EvalArgs {
  std::string data, ckpt, report, perturb;
  std::uint64_t seed = 0;
};

struct InferArgs {
  std::string image, ckpt;
};

struct PerturbArgs {
  std::string in, out, kind;
  std::uint64_t seed = 0;
};

struct SpectrumArgs {
  std::string dir, out;
};

int gen_toy(const GenToyArgs& a, std::ostream& out) {
  const std::size_t test_n = a.test_n ? a.test_n : std::max<std::size_t>(1, a.n / 2);
  const fs::path root(a.out);
  gen_toy_dataset(a.n, a.size, a.seed, root / "train");
  gen_toy_dataset(test_n, a.size, derive_seed(a.seed, 0x7e57), root / "test");
  out << "wrote " << a.n << "+" << a.n << " training and " << test_n << "+" << test_n
      << " test images of " << a.size << "x" << a.size << " to " << root.string() << "\n";
  return kExitOk;
}

int train_cmd(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  TrainConfig config = train_config_from_json(read_json(a.config));
  if (a.seed) config.seed = *a.seed;
  const auto data = load_all(scan_dataset(a.data));
  const auto result = train(data, config, &err);
  save_checkpoint(a.out, {config.model, result.params});
  const fs::path trace = a.trace.empty() ? fs::path(a.out + ".csv") : fs::path(a.trace);
  write_text(trace, trace_csv(result.trace));
  out << "checkpoint " << a.out << ", trace " << trace.string() << "\n";
  return kExitOk;
}

int eval_cmd(const EvalArgs& a, std::ostream& out) {
  const Checkpoint ckpt = load_checkpoint(a.ckpt);
  const DatasetManifest manifest = scan_dataset(a.data);
  const Scorer scorer = model_scorer(ckpt);
  EvalReport report = evaluate(scorer, manifest);
  if (!a.perturb.empty()) {
    std::vector<PerturbKind> kinds;
    if (a.perturb == "all") {
      kinds = full_perturbation_suite();
    } else {
      kinds.push_back(parse_perturb_kind(a.perturb));
    }
    report.perturbation = robustness_eval(scorer, manifest, kinds, a.seed, report);
  }
  write_text(a.report, report.to_json().dump(2) + "\n");
  out << std::setprecision(6) << "mAcc=" << report.macc << " mAP=" << report.map;
  if (report.perturbation) out << " average_drop=" << report.perturbation->average_drop;
  out << "\n";
  return kExitOk;
}

int infer_cmd(const InferArgs& a, std::ostream& out) {
  const Checkpoint ckpt = load_checkpoint(a.ckpt);
  const GrayImage image = load_image(a.image);
  const float logit = forward(ckpt.params, ckpt.config, image);
  const double score = 1.0 / (1.0 + std::exp(-double(logit)));
  out << std::fixed << std::setprecision(6) << "score=" << score
      << " label=" << (score >= 0.5 ? "fake" : "real") << "\n";
  return kExitOk;
}

int perturb_cmd(const PerturbArgs& a, std::ostream& out) {
  const auto kind = parse_perturb_kind(a.kind);
  const auto manifest = perturb_dataset(scan_dataset(a.in), kind, a.seed, a.out);
  std::size_t n = 0;
  for (const auto& s : manifest.subsets) n += s.n_real + s.n_fake;
  out << "perturbed " << n << " images (" << a.kind << ") into " << a.out << "\n";
  return kExitOk;
}

int spectrum_cmd(const SpectrumArgs& a, std::ostream& out) {
  const SpectrumMap map = spectrum_average(fs::path(a.dir));
  save_image(a.out, map.image);
  out << "spectrum " << map.width << "x" << map.height << " written to " << a.out << "\n";
  return kExitOk;
}

int gradcheck_cmd(std::uint64_t seed, std::ostream& out) {
  bool ok = true;
  for (const auto& r : gradcheck_all(seed)) {
    out << (r.passed ? "PASS " : "FAIL ") << r.name << " max_rel_err=" << std::scientific
        << std::setprecision(3) << r.max_rel_error << std::defaultfloat << " entries=" << r.entries
        << " worst=" << r.worst << "\n";
    ok = ok && r.passed;
  }
  return ok ? kExitOk : kExitRuntime;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"ESF-CTFD detector toolchain", "esfctl"};
  app.require_subcommand(1);

  GenToyArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-toy", "Generate the synthetic real/fake dataset");
  gen_cmd->add_option("--out", gen.out, "Output directory (train/ and test/ are created)")->required();
  gen_cmd->add_option("--n", gen.n, "Training images per class")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--test-n", gen.test_n, "Test images per class (default n/2)");
  gen_cmd->add_option("--size", gen.size, "Image side, a power of two >= 32");
  gen_cmd->add_option("--seed", gen.seed, "Random seed");

  TrainArgs tr;
  auto* train_sub = app.add_subcommand("train", "Train a detector");
  train_sub->add_option("--data", tr.data, "Dataset root with <subset>/{real,fake}")->required();
  train_sub->add_option("--config", tr.config, "Training config JSON")->required();
  train_sub->add_option("--out", tr.out, "Checkpoint path")->required();
  train_sub->add_option("--trace", tr.trace, "Loss trace CSV (default <out>.csv)");
  train_sub->add_option("--seed", tr.seed, "Override the config seed");

  EvalArgs ev;
  auto* eval_sub = app.add_subcommand("eval", "Evaluate a checkpoint and write a JSON report");
  eval_sub->add_option("--data", ev.data, "Dataset root")->required();
  eval_sub->add_option("--ckpt", ev.ckpt, "Checkpoint")->required();
  eval_sub->add_option("--report", ev.report, "Report JSON path")->required();
  eval_sub->add_option("--perturb", ev.perturb, "Robustness suite: all|blur|crop|jpeg|noise")
      ->check(CLI::IsMember({"all", "blur", "crop", "jpeg", "noise"}));
  eval_sub->add_option("--seed", ev.seed, "Perturbation seed");

  InferArgs inf;
  auto* infer_sub = app.add_subcommand("infer", "Score one image");
  infer_sub->add_option("--image", inf.image, "PGM or PNG image")->required();
  infer_sub->add_option("--ckpt", inf.ckpt, "Checkpoint")->required();

  PerturbArgs pa;
  auto* perturb_sub = app.add_subcommand("perturb", "Write a perturbed copy of a dataset");
  perturb_sub->add_option("--in", pa.in, "Source dataset root")->required();
  perturb_sub->add_option("--out", pa.out, "Destination root")->required();
  perturb_sub->add_option("--kind", pa.kind, "blur|crop|jpeg|noise|all")
      ->required()
      ->check(CLI::IsMember({"all", "blur", "crop", "jpeg", "noise"}));
  perturb_sub->add_option("--seed", pa.seed, "Random seed");

  SpectrumArgs sp;
  auto* spectrum_sub = app.add_subcommand("spectrum", "Average log-magnitude spectrum of a directory");
  spectrum_sub->add_option("--dir", sp.dir, "Directory of equally sized images")->required();
  spectrum_sub->add_option("--out", sp.out, "Output image (.png or .pgm)")->required();

  std::uint64_t gc_seed = 0;
  auto* gradcheck_sub = app.add_subcommand("gradcheck", "Run the finite-difference gradient suites");
  gradcheck_sub->add_option("--seed", gc_seed, "Random seed");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "esfctl: " << e.what() << "\n";
    const CLI::App* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    err << sub->help();
    return kExitUsage;
  }

  try {
    if (*gen_cmd) return gen_toy(gen, out);
    if (*train_sub) return train_cmd(tr, out, err);
    if (*eval_sub) return eval_cmd(ev, out);
    if (*infer_sub) return infer_cmd(inf, out);
    if (*perturb_sub) return perturb_cmd(pa, out);
    if (*spectrum_sub) return spectrum_cmd(sp, out);
    if (*gradcheck_sub) return gradcheck_cmd(gc_seed, out);
  } catch (const ConfigError& e) {
    err << "esfctl: " << e.what() << "\n";
    return kExitUsage;
  } catch (const IoError& e) {
    err << "esfctl: " << e.what() << "\n";
    return kExitUsage;
  } catch (const FormatError& e) {
    err << "esfctl: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    err << "esfctl: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "esfctl: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace esf::cli
