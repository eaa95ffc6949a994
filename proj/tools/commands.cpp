#include "commands.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "logvm/autodiff.hpp"
#include "logvm/parallel.hpp"
#include "logvm/rng.hpp"
#include "logvm/s6.hpp"
#include "logvm/serialize.hpp"

namespace logvm::cli {

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

void apply_threads(std::size_t threads) {
  if (threads > 0) set_default_threads(threads);
}

}  // namespace

int cmd_gradcheck(const std::string& scope, std::uint64_t seed, std::ostream& out, const std::vector<GradCase>& extra) {
  std::vector<GradCase> cases;
  if (scope == "ops" || scope == "all") cases = op_cases(seed);
  if (scope == "block" || scope == "all") {
    auto b = block_cases(seed);
    cases.insert(cases.end(), b.begin(), b.end());
  }
  if (scope == "model" || scope == "all") {
    auto m = model_cases(seed);
    cases.insert(cases.end(), m.begin(), m.end());
  }
  if (cases.empty()) throw ConfigError("gradcheck: unknown scope '" + scope + "'");
  cases.insert(cases.end(), extra.begin(), extra.end());

  out << std::setprecision(3);
  const auto outcomes = run_grad_cases(cases, seed, out);
  int code = kExitOk;
  const GradOutcome* worst = nullptr;
  for (const auto& o : outcomes) {
    if (!worst || o.result.max_rel_error > worst->result.max_rel_error) worst = &o;
    if (!o.passed) {
      out << "FAIL " << o.name << ": max rel. error " << o.result.max_rel_error << " at input "
          << o.result.worst_input << " index " << o.result.worst_index << " (analytic " << o.result.worst_analytic
          << ", numeric " << o.result.worst_numeric << ")\n";
      code = kExitCheckFailed;
    }
  }
  if (code == kExitOk && worst) {
    out << "all " << outcomes.size() << " checks passed; worst " << worst->name << " " << worst->result.max_rel_error
        << "\n";
  }
  return code;
}

std::vector<ScanBenchRow> scan_bench(const ScanBenchOptions& opt) {
  if (opt.len == 0 || opt.channels == 0 || opt.state == 0 || opt.chunk == 0 || opt.threads == 0) {
    throw ConfigError("scanbench: len, channels, state, chunk and threads must be positive");
  }
  autodiff::NoGradGuard guard;
  Rng rng(opt.seed, "scanbench");
  s6::S6Params p = s6::S6Params::init(opt.channels, opt.state, rng);
  p.delta_bias = rng.uniform_tensor({opt.channels}, -4.0, 0.0);
  const Tensor x = rng.normal_tensor({opt.len, opt.channels}, 0.0, 1.0);

  const Tensor ref = s6::selective_scan_seq(x, p);
  const Tensor par = s6::selective_scan_parallel(x, p, opt.chunk, opt.threads);
  const double err = s6::max_rel_diff(ref, par);
  if (!(err <= 1e-10)) {
    std::ostringstream msg;
    msg << "scanbench: equivalence gate failed, rel. error " << err;
    throw std::runtime_error(msg.str());
  }

  flops::start();
  s6::selective_scan_seq(x, p);
  const double work = 2.0 * static_cast<double>(flops::stop());

  std::vector<double> seq_t, par_t;
  for (std::size_t r = 0; r < std::max<std::size_t>(opt.repeats, 1); ++r) {
    auto t0 = std::chrono::steady_clock::now();
    s6::selective_scan_seq(x, p);
    seq_t.push_back(seconds_since(t0));
    t0 = std::chrono::steady_clock::now();
    s6::selective_scan_parallel(x, p, opt.chunk, opt.threads);
    par_t.push_back(seconds_since(t0));
  }
  const double ts = median(seq_t), tp = median(par_t);
  return {{"sequential", 1, opt.len, opt.channels, ts, work / ts / 1e9},
          {"parallel", opt.threads, opt.len, opt.channels, tp, work / tp / 1e9}};
}

int cmd_scanbench(const ScanBenchOptions& opt, std::ostream& out, std::ostream& err) {
  std::vector<ScanBenchRow> rows;
  try {
    rows = scan_bench(opt);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::runtime_error& e) {
    err << e.what() << "\n";
    return kExitCheckFailed;
  }
  out << "impl,threads,len,channels,secs,gflops\n" << std::setprecision(6);
  for (const auto& r : rows) {
    out << r.impl << ',' << r.threads << ',' << r.len << ',' << r.channels << ',' << r.secs << ',' << r.gflops << '\n';
  }
  return kExitOk;
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}

train::TrainResult run_training(const RunConfig& cfg, std::ostream* rows) {
  apply_threads(cfg.threads);
  if (rows) *rows << "epoch,split,loss,dice,iou,seconds\n" << std::setprecision(17);
  auto result = train::train(cfg.train, [rows](const train::EpochMetrics& m) {
    if (rows) {
      *rows << m.epoch << ',' << m.split << ',' << m.loss << ',' << m.dice << ',' << m.iou << ',' << m.seconds
            << std::endl;
    }
  });
  if (!cfg.train.out_dir.empty()) {
    const std::string json = to_json(cfg);
    write_text(cfg.train.out_dir / "config.json", json);
    write_text(cfg.train.out_dir / "checkpoint" / "config.json", json);
  }
  return result;
}

double final_val(const std::vector<train::EpochMetrics>& history, double train::EpochMetrics::*field) {
  for (auto it = history.rbegin(); it != history.rend(); ++it) {
    if (it->split == "val") return (*it).*field;
  }
  return 0.0;
}

}  // namespace

int cmd_train(const RunConfig& cfg, std::ostream& out) {
  run_training(cfg, &out);
  return kExitOk;
}

std::vector<RunConfig> ablation_cells(const RunConfig& base, const std::string& axis, std::vector<std::string>& names) {
  std::vector<RunConfig> cells;
  names.clear();
  if (axis == "variant") {
    for (auto v : {blocks::Variant::Vanilla, blocks::Variant::Local, blocks::Variant::Global,
                   blocks::Variant::LocalGlobal}) {
      RunConfig c = base;
      c.train.model.block.variant = v;
      cells.push_back(c);
      names.push_back(blocks::to_string(v));
    }
  } else if (axis == "strategy") {
    for (auto s : {ConcatStrategy::Head, ConcatStrategy::Split, ConcatStrategy::Middle, ConcatStrategy::Interleaved}) {
      RunConfig c = base;
      c.train.model.block.strategy = s;
      if (!blocks::uses_gtx(c.train.model.block.variant)) c.train.model.block.variant = blocks::Variant::LocalGlobal;
      cells.push_back(c);
      names.push_back(to_string(s));
    }
  } else if (axis == "directions") {
    for (std::size_t m : {1, 2, 4}) {
      RunConfig c = base;
      c.train.model.block.directions = m;
      cells.push_back(c);
      names.push_back("M=" + std::to_string(m));
    }
  } else {
    throw ConfigError("ablate: unknown axis '" + axis + "'");
  }
  return cells;
}

std::vector<AblationCell> run_ablation(const RunConfig& base, const std::string& axis, std::ostream* log) {
  std::vector<std::string> names;
  const auto cells = ablation_cells(base, axis, names);
  std::vector<AblationCell> out;
  for (std::size_t c = 0; c < cells.size(); ++c) {
    AblationCell cell{axis, names[c], {}, {}};
    for (std::size_t k = 0; k < base.seeds; ++k) {
      RunConfig run = cells[c];
      run.train.seed = base.train.seed + k;
      run.train.task.seed = base.train.task.seed + k;
      run.train.stop_dice = 0.0;
      if (!base.train.out_dir.empty()) {
        run.train.out_dir = base.train.out_dir / ("ablate-" + axis) / names[c] / ("seed" + std::to_string(k));
      }
      const auto result = run_training(run, nullptr);
      cell.dice.push_back(final_val(result.history, &train::EpochMetrics::dice));
      cell.iou.push_back(final_val(result.history, &train::EpochMetrics::iou));
      if (log) *log << axis << ' ' << names[c] << " seed" << k << " dice " << cell.dice.back() << std::endl;
    }
    out.push_back(cell);
  }
  return out;
}

namespace {

std::pair<double, double> mean_se(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  if (v.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  const double sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
  return {mean, sd / std::sqrt(static_cast<double>(v.size()))};
}

}  // namespace

void write_ablation_summary(std::ostream& os, const std::vector<AblationCell>& cells) {
  os << "axis,cell,seeds,dice_mean,dice_se,iou_mean,iou_se\n" << std::setprecision(17);
  for (const auto& c : cells) {
    const auto [dm, ds] = mean_se(c.dice);
    const auto [im, is] = mean_se(c.iou);
    os << c.axis << ',' << c.cell << ',' << c.dice.size() << ',' << dm << ',' << ds << ',' << im << ',' << is << '\n';
  }
}

int cmd_ablate(const RunConfig& base, const std::string& axis, std::ostream& out) {
  const auto cells = run_ablation(base, axis, &std::cerr);
  write_ablation_summary(out, cells);
  if (!base.train.out_dir.empty()) {
    std::ostringstream ss;
    write_ablation_summary(ss, cells);
    write_text(base.train.out_dir / ("ablate-" + axis) / "summary.csv", ss.str());
  }
  return kExitOk;
}

int cmd_erf(const std::filesystem::path& checkpoint, std::size_t i, std::size_t j, const std::filesystem::path& out_path,
            std::size_t image_index, std::ostream& out) {
  const auto dir = std::filesystem::is_directory(checkpoint) ? checkpoint : checkpoint.parent_path();
  const RunConfig cfg = load_config(dir / "config.json");
  seg::ModelWeights w = seg::build_model(cfg.train.model, cfg.train.seed);
  w.load(io::load_checkpoint(checkpoint));
  train::SynthTask task = cfg.train.task;
  task.seed = derive_seed(task.seed, "val");
  const train::Sample sample = train::gen_synthetic(task, image_index);
  const std::size_t probe[] = {i, j};
  const Tensor map = train::erf_map(w, sample.image, probe);
  train::write_pgm(out_path, map);
  std::size_t support = 0;
  for (double v : map.values()) support += v > 0 ? 1 : 0;
  out << "wrote " << out_path.string() << " (" << map.dim(0) << "x" << map.dim(1) << ", " << support
      << " nonzero pixels)\n";
  return kExitOk;
}

namespace {

void add_threads(CLI::App* sub, std::size_t& threads) {
  sub->add_option("--threads", threads, "worker threads (default: LOGVM_THREADS or 1)");
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Local and global token extraction for vision Mamba blocks"};
  app.require_subcommand(1);

  std::size_t threads = 0;
  std::string scope = "ops";
  std::uint64_t seed = 1;
  bool faulty = false;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  gc->add_option("--scope", scope, "ops | block | model | all")->check(CLI::IsMember({"ops", "block", "model", "all"}));
  gc->add_option("--seed", seed);
  gc->add_flag("--with-faulty-op", faulty, "append a deliberately broken op (negative control)");
  add_threads(gc, threads);

  ScanBenchOptions sb;
  auto* bench = app.add_subcommand("scanbench", "sequential vs chunked scan timing");
  bench->add_option("--len", sb.len);
  bench->add_option("--channels", sb.channels);
  bench->add_option("--state", sb.state);
  bench->add_option("--threads", sb.threads);
  bench->add_option("--chunk", sb.chunk);
  bench->add_option("--repeats", sb.repeats);
  bench->add_option("--seed", sb.seed);

  std::string config_path, variant, axis, out_dir;
  std::optional<std::uint64_t> run_seed;
  std::optional<std::size_t> epochs, seeds;
  bool print_config = false;
  auto* tr = app.add_subcommand("train", "train the toy segmentation model");
  auto* ab = app.add_subcommand("ablate", "sweep one ablation axis over seeds");
  for (auto* sub : {tr, ab}) {
    sub->add_option("--config", config_path, "JSON run config");
    sub->add_option("--variant", variant)->check(CLI::IsMember({"vanilla", "local", "global", "log"}));
    sub->add_option("--seed", run_seed);
    sub->add_option("--epochs", epochs);
    sub->add_option("--out", out_dir, "output directory");
    sub->add_flag("--print-config", print_config, "print the effective config and exit");
    add_threads(sub, threads);
  }
  ab->add_option("--axis", axis, "variant | strategy | directions")
      ->required()
      ->check(CLI::IsMember({"variant", "strategy", "directions"}));
  ab->add_option("--seeds", seeds);

  std::string checkpoint, probe, pgm;
  std::size_t image_index = 0;
  auto* erf = app.add_subcommand("erf", "effective receptive field of a checkpoint");
  erf->add_option("--checkpoint", checkpoint)->required();
  erf->add_option("--probe", probe, "i,j")->required();
  erf->add_option("--out", pgm)->required();
  erf->add_option("--image", image_index, "validation image index");
  add_threads(erf, threads);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << e.what() << "\n";
    return kExitBadConfig;
  }

  try {
    if (gc->parsed()) {
      apply_threads(threads);
      std::vector<GradCase> extra;
      if (faulty) extra.push_back(faulty_case());
      return cmd_gradcheck(scope, seed, out, extra);
    }
    if (bench->parsed()) return cmd_scanbench(sb, out, err);
    if (tr->parsed() || ab->parsed()) {
      RunConfig cfg = config_path.empty() ? default_config() : load_config(config_path);
      if (!variant.empty()) cfg.train.model.block.variant = blocks::parse_variant(variant);
      if (run_seed) cfg.train.seed = *run_seed;
      if (epochs) cfg.train.epochs = *epochs;
      if (seeds) cfg.seeds = *seeds;
      if (!out_dir.empty()) cfg.train.out_dir = out_dir;
      if (threads > 0) cfg.threads = threads;
      cfg = parse_config(to_json(cfg));  // re-validate after overrides
      if (print_config) {
        out << to_json(cfg);
        return kExitOk;
      }
      return tr->parsed() ? cmd_train(cfg, out) : cmd_ablate(cfg, axis, out);
    }
    if (erf->parsed()) {
      apply_threads(threads);
      const auto comma = probe.find(',');
      if (comma == std::string::npos) throw ConfigError("erf: --probe expects i,j");
      std::size_t i = 0, j = 0;
      try {
        i = std::stoul(probe.substr(0, comma));
        j = std::stoul(probe.substr(comma + 1));
      } catch (const std::exception&) {
        throw ConfigError("erf: --probe expects i,j");
      }
      return cmd_erf(checkpoint, i, j, pgm, image_index, out);
    }
  } catch (const ConfigError& e) {
    err << e.what() << "\n";
    return kExitBadConfig;
  } catch (const ShapeError& e) {
    err << e.what() << "\n";
    return kExitBadConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitCheckFailed;
  }
  return kExitBadConfig;
}

}  // namespace logvm::cli
