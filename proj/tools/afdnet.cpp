#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "afd/pipeline.hpp"

namespace fs = std::filesystem;
using namespace afd;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitCheckpoint = 4;

/// Raised for usage problems that map to the config exit code.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void prepare_run_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir) && !fs::is_directory(dir)) throw UsageError(dir.string() + " exists and is not a directory");
  if (fs::exists(dir) && !fs::is_empty(dir) && !force) {
    throw UsageError("output directory " + dir.string() + " is not empty; pass --force to reuse it");
  }
  fs::create_directories(dir);
}

void refuse_existing(const fs::path& file, bool force) {
  if (fs::exists(file) && !force) throw UsageError(file.string() + " already exists; pass --force to overwrite");
  fs::create_directories(file.parent_path().empty() ? fs::path(".") : file.parent_path());
}

std::string timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}

/// Resolved config plus a small manifest naming the command and times.
void write_manifest(const fs::path& dir, const std::string& config_name, const TrainConfig& config,
                    const std::string& command, const std::string& config_path) {
  write_text(dir / config_name, config_to_json(config));
  std::ofstream os(dir / "manifest.txt", std::ios::app);
  os << "command=" << command << "\nconfig=" << config_path << "\nresolved=" << config_name
     << "\nstarted=" << timestamp() << "\n";
}

/// Appends rows to a training log, writing the header for a new file.
class LogFile {
 public:
  explicit LogFile(const fs::path& path) {
    const bool fresh = !fs::exists(path) || fs::file_size(path) == 0;
    os_.open(path, std::ios::app);
    if (!os_) throw std::runtime_error("cannot write " + path.string());
    if (fresh) os_ << kTrainLogHeader << '\n';
  }
  void operator()(const LogRow& row) { os_ << format_log_row(row) << '\n' << std::flush; }

 private:
  std::ofstream os_;
};

void write_abort_dump(const fs::path& dir, const TrainingAborted& e) {
  std::ofstream os(dir / "abort.txt");
  os << "iteration=" << e.iteration << "\nepisode_seed=" << e.episode_seed << "\nreason=" << e.what() << "\n";
}

TrainConfig config_with_seed(const std::string& path, const std::optional<std::uint64_t>& seed) {
  if (path.empty()) throw ConfigError("--config is required");
  TrainConfig c = load_config(path);
  if (seed) c.seed = *seed;
  c.validate();
  return c;
}

int cmd_train_base(const std::string& config_path, const fs::path& out, std::optional<std::uint64_t> seed,
                   bool force) {
  const TrainConfig config = config_with_seed(config_path, seed);
  prepare_run_dir(out, force);
  fs::remove(out / "train_log.csv");
  write_manifest(out, "config.resolved.json", config, "train-base", config_path);
  LogFile log(out / "train_log.csv");
  try {
    const Checkpoint ck = train_base(config, [&](const LogRow& r) { log(r); });
    save_checkpoint(ck, out / "base.ckpt");
  } catch (const TrainingAborted& e) {
    write_abort_dump(out, e);
    throw;
  }
  std::cout << "wrote " << (out / "base.ckpt").string() << '\n';
  return kExitOk;
}

int cmd_finetune(const std::string& config_path, const fs::path& from, int shots, const fs::path& out, bool force) {
  const TrainConfig config = config_with_seed(config_path, std::nullopt);
  if (shots < 1) throw ConfigError("--shots must be >= 1");
  if (!is_standard_shot_count(shots)) {
    std::cerr << "warning: K=" << shots << " is outside the usual fine-tuning shot counts {1,2,3,5,10}\n";
  }
  const Checkpoint base = load_checkpoint(from);
  model_from_checkpoint(base, config);  // shape validation before touching the output directory
  const fs::path ckpt_path = out / ("ft_" + std::to_string(shots) + ".ckpt");
  refuse_existing(ckpt_path, force);
  write_manifest(out, "config.finetune_" + std::to_string(shots) + ".resolved.json", config, "finetune",
                 config_path);
  LogFile log(out / "train_log.csv");
  try {
    const Checkpoint ck = finetune(base, shots, config, [&](const LogRow& r) { log(r); });
    save_checkpoint(ck, ckpt_path);
  } catch (const TrainingAborted& e) {
    write_abort_dump(out, e);
    throw;
  }
  std::cout << "wrote " << ckpt_path.string() << '\n';
  return kExitOk;
}

int cmd_eval(const fs::path& from, const std::string& subset_name, int repeats, int scenes, const fs::path& out,
             bool force) {
  const Subset subset = parse_subset(subset_name);
  const Checkpoint ck = load_checkpoint(from);
  TrainConfig config = checkpoint_config(ck);
  if (repeats > 0) config.eval_repeats = repeats;
  if (scenes > 0) config.eval_scenes = scenes;
  config.validate();
  const Model model = model_from_checkpoint(ck, config);
  const fs::path csv = out / "eval.csv";
  refuse_existing(csv, force);
  write_text(out / "eval_config.resolved.json", config_to_json(config));
  const EvalReport report = evaluate(model, config.split(), config.eval_options(subset));
  for (const auto& w : report.warnings) std::cerr << "warning: " << w << '\n';
  write_eval_csv(csv, report);
  std::cout << format_eval_table(report);
  return kExitOk;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string f;
  while (std::getline(ss, f, ',')) out.push_back(f);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

int cmd_inspect_weights(const fs::path& log_path, const fs::path& out, bool force) {
  std::ifstream is(log_path);
  if (!is) throw UsageError("cannot read log " + log_path.string());
  std::string header;
  if (!std::getline(is, header)) throw UsageError(log_path.string() + " is empty");
  const auto cols = split_csv_line(header);
  const std::vector<std::string> wanted = {"iteration", "lambda_cls_conv", "lambda_cls_fc", "lambda_reg_conv",
                                           "lambda_reg_fc"};
  std::vector<std::size_t> idx;
  for (const auto& w : wanted) {
    auto it = std::find(cols.begin(), cols.end(), w);
    if (it == cols.end()) throw UsageError(log_path.string() + " has no '" + w + "' column");
    idx.push_back(static_cast<std::size_t>(it - cols.begin()));
  }
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto f = split_csv_line(line);
    if (f.size() != cols.size()) throw UsageError("malformed log row: " + line);
    std::vector<std::string> r;
    for (auto i : idx) r.push_back(f[i]);
    rows.push_back(std::move(r));
  }
  if (rows.empty()) throw UsageError(log_path.string() + " has no data rows");

  constexpr std::size_t kMaxRows = 2000;
  std::vector<std::size_t> keep;
  if (rows.size() <= kMaxRows) {
    for (std::size_t i = 0; i < rows.size(); ++i) keep.push_back(i);
  } else {
    // Evenly spaced picks; the first and last rows are always included.
    for (std::size_t k = 0; k < kMaxRows; ++k) {
      keep.push_back(static_cast<std::size_t>(
          std::llround(static_cast<double>(k) * static_cast<double>(rows.size() - 1) / (kMaxRows - 1))));
    }
  }
  const fs::path dest = out / "lambda_trajectories.csv";
  refuse_existing(dest, force);
  std::ofstream os(dest);
  for (std::size_t i = 0; i < wanted.size(); ++i) os << (i ? "," : "") << wanted[i];
  os << '\n';
  for (auto k : keep) {
    for (std::size_t i = 0; i < rows[k].size(); ++i) os << (i ? "," : "") << rows[k][i];
    os << '\n';
  }
  std::cout << "wrote " << keep.size() << " rows to " << dest.string() << '\n';
  return kExitOk;
}

std::vector<std::uint64_t> parse_seeds(const std::string& text, std::uint64_t fallback) {
  if (text.empty()) return {fallback};
  std::vector<std::uint64_t> seeds;
  for (const auto& s : split_csv_line(text)) {
    try {
      seeds.push_back(std::stoull(s));
    } catch (const std::exception&) {
      throw ConfigError("--seeds: '" + s + "' is not a seed");
    }
  }
  return seeds;
}

int cmd_ablate(const std::string& config_path, const std::string& grid, const std::string& seeds_text,
               const fs::path& out, bool force) {
  const TrainConfig config = config_with_seed(config_path, std::nullopt);
  std::vector<AblationCell> cells;
  if (grid == "table4") {
    cells = table4_cells();
  } else if (grid == "table5") {
    cells = table5_cells();
  } else {
    throw UsageError("unknown grid '" + grid + "' (expected table4 or table5)");
  }
  const auto seeds = parse_seeds(seeds_text, config.seed);
  prepare_run_dir(out, force);
  write_manifest(out, "config.resolved.json", config, "ablate " + grid, config_path);

  std::ofstream csv(out / "ablation.csv");
  csv << "grid,cell,cls_conv,cls_fc,reg_conv,reg_fc,meta_cls,meta_reg,seeds,base_map50_mean,novel_map50_mean,"
         "novel_map50_std\n"
      << std::setprecision(17);
  for (const auto& cell : cells) {
    std::vector<double> base_maps, novel_maps;
    for (auto seed : seeds) {
      TrainConfig c = ablation_config(config, cell);
      c.seed = seed;
      const Checkpoint base = train_base(c);
      const Checkpoint ft = finetune(base, c.finetune_shots, c);
      const Model model = model_from_checkpoint(ft, c);
      base_maps.push_back(evaluate(model, c.split(), c.eval_options(Subset::base)).map_mean);
      novel_maps.push_back(evaluate(model, c.split(), c.eval_options(Subset::novel)).map_mean);
      std::cout << grid << ' ' << cell.name << " seed " << seed << ": base mAP50 " << base_maps.back()
                << ", novel mAP50 " << novel_maps.back() << std::endl;
    }
    auto mean = [](const std::vector<double>& v) {
      double s = 0;
      for (double x : v) s += x;
      return s / double(v.size());
    };
    const double nm = mean(novel_maps);
    double ss = 0;
    for (double x : novel_maps) ss += (x - nm) * (x - nm);
    std::string seed_list;
    for (std::size_t i = 0; i < seeds.size(); ++i) seed_list += (i ? ";" : "") + std::to_string(seeds[i]);
    const auto& p = cell.paths;
    csv << grid << ',' << cell.name << ',' << p.cls_conv << ',' << p.cls_fc << ',' << p.reg_conv << ',' << p.reg_fc
        << ',' << cell.meta_cls << ',' << cell.meta_reg << ',' << seed_list << ',' << mean(base_maps) << ',' << nm
        << ',' << std::sqrt(ss / double(novel_maps.size())) << '\n'
        << std::flush;
  }
  return kExitOk;
}

int cmd_gen_data(const std::string& config_path, const fs::path& out, int count, const std::string& subset_name,
                 bool force) {
  const TrainConfig config = config_path.empty() ? TrainConfig{} : config_with_seed(config_path, std::nullopt);
  if (count < 1) throw ConfigError("--count must be >= 1");
  const Subset subset = parse_subset(subset_name);
  const ClassSplit split = config.split();
  const std::vector<int> pool = subset == Subset::base    ? split.base_classes
                                : subset == Subset::novel ? split.novel_classes
                                                          : split.all_classes();
  prepare_run_dir(out, force);
  Rng rng(eval_seed(config.seed));
  std::vector<Scene> scenes;
  const auto& w = config.world;
  for (int i = 0; i < count; ++i) scenes.push_back(gen_scene(rng, pool, w.max_objects, w.height, w.width, w));
  save_scene_cache(out, scenes);
  std::cout << "wrote " << count << " scenes to " << out.string() << '\n';
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"AFD-Net few-shot detector on synthetic shapes"};
  app.require_subcommand(1);

  std::string config_path, from, subset = "novel", grid, log_path, seeds_text;
  std::string out;
  std::optional<std::uint64_t> seed;
  int shots = 0, repeats = 0, scenes = 0, count = 100;
  bool force = false;

  auto* train = app.add_subcommand("train-base", "base-phase training on base classes");
  train->add_option("--config", config_path, "config file (JSON)");
  train->add_option("--out", out, "run directory")->required();
  train->add_option("--seed", seed, "override the config seed");
  train->add_flag("--force", force, "reuse a non-empty run directory");

  auto* ft = app.add_subcommand("finetune", "K-shot fine-tuning on base and novel classes");
  ft->add_option("--config", config_path, "config file (JSON)");
  ft->add_option("--from", from, "base checkpoint")->required();
  ft->add_option("--shots", shots, "K shots per class")->required();
  ft->add_option("--out", out, "run directory")->required();
  ft->add_flag("--force", force, "overwrite an existing ft_K.ckpt");

  auto* ev = app.add_subcommand("eval", "AP50 / mAP over repeated held-out runs");
  ev->add_option("--from", from, "checkpoint")->required();
  ev->add_option("--subset", subset, "base, novel or all");
  ev->add_option("--repeats", repeats, "repeated runs (default from the checkpoint config)");
  ev->add_option("--scenes", scenes, "scenes per repeat (default from the checkpoint config)");
  ev->add_option("--out", out, "output directory")->required();
  ev->add_flag("--force", force, "overwrite an existing eval.csv");

  auto* insp = app.add_subcommand("inspect-weights", "extract fusion weight trajectories from a training log");
  insp->add_option("--log", log_path, "train_log.csv")->required();
  insp->add_option("--out", out, "output directory")->required();
  insp->add_flag("--force", force, "overwrite an existing lambda_trajectories.csv");

  auto* abl = app.add_subcommand("ablate", "fusion (table4) or meta-loss (table5) ablation grid");
  abl->add_option("--config", config_path, "config file (JSON)");
  abl->add_option("--grid", grid, "table4 or table5")->required();
  abl->add_option("--seeds", seeds_text, "comma-separated seeds (default: the config seed)");
  abl->add_option("--out", out, "run directory")->required();
  abl->add_flag("--force", force, "reuse a non-empty run directory");

  auto* gen = app.add_subcommand("gen-data", "write held-out synthetic scenes to a cache directory");
  gen->add_option("--config", config_path, "config file (JSON)");
  gen->add_option("--count", count, "number of scenes");
  gen->add_option("--subset", subset, "class pool: base, novel or all");
  gen->add_option("--out", out, "cache directory")->required();
  gen->add_flag("--force", force, "reuse a non-empty directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*train) return cmd_train_base(config_path, out, seed, force);
    if (*ft) return cmd_finetune(config_path, from, shots, out, force);
    if (*ev) return cmd_eval(from, subset, repeats, scenes, out, force);
    if (*insp) return cmd_inspect_weights(log_path, out, force);
    if (*abl) return cmd_ablate(config_path, grid, seeds_text, out, force);
    if (*gen) return cmd_gen_data(config_path, out, count, subset, force);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const TrainingAborted& e) {
    std::cerr << "numeric abort: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << '\n';
    return kExitCheckpoint;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return kExitOk;
}
