#include "afd/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <deque>
#include <fstream>
#include <future>
#include <iomanip>
#include <set>
#include <sstream>
#include <thread>
#include <type_traits>

#include <json.hpp>

#include "afd/ops.hpp"

namespace afd {

using nlohmann::json;

// --- config -------------------------------------------------------------------------

namespace {

[[noreturn]] void field_error(const std::string& field, const std::string& msg) {
  throw ConfigError("config field '" + field + "': " + msg);
}

/// Reads one JSON object, remembering which keys were consumed.
class ObjectReader {
 public:
  ObjectReader(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) field_error(path_.empty() ? "<root>" : path_, "expected an object");
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  template <typename T>
  void read(const std::string& key, T& out) {
    seen_.insert(key);
    auto it = obj_.find(key);
    if (it == obj_.end()) return;
    if constexpr (std::is_same_v<T, bool>) {
      if (!it->is_boolean()) field_error(field(key), "expected true or false");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!it->is_string()) field_error(field(key), "expected a string");
    } else if constexpr (std::is_integral_v<T>) {
      if (!it->is_number_integer()) field_error(field(key), "expected an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (it->is_number_integer() && !it->is_number_unsigned()) field_error(field(key), "must be non-negative");
      }
    } else {
      if (!it->is_number()) field_error(field(key), "expected a number");
    }
    out = it->get<T>();
  }

  ObjectReader child(const std::string& key) {
    seen_.insert(key);
    auto it = obj_.find(key);
    static const json empty = json::object();
    return ObjectReader(it == obj_.end() ? empty : *it, field(key));
  }

  void reject_unknown() const {
    for (auto it = obj_.begin(); it != obj_.end(); ++it) {
      if (!seen_.count(it.key())) field_error(field(it.key()), "unknown key");
    }
  }

 private:
  const json& obj_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace

void TrainConfig::validate() const {
  auto require = [](bool ok, const char* field, const std::string& msg) {
    if (!ok) field_error(field, msg);
  };
  require(num_classes >= 2, "num_classes", "must be >= 2");
  require(num_novel >= 1 && num_novel < num_classes, "num_novel", "must be in [1, num_classes)");
  require(base_episodes >= 0, "base.episodes", "must be >= 0");
  require(finetune_episodes >= 0, "finetune.episodes", "must be >= 0");
  require(base_shots >= 1, "base.shots", "K must be >= 1");
  require(finetune_shots >= 1, "finetune.shots", "K must be >= 1");
  require(base_m >= 1 && base_m <= num_classes - num_novel, "base.m", "must be in [1, number of base classes]");
  require(finetune_m >= 1 && finetune_m <= num_classes, "finetune.m", "must be in [1, num_classes]");
  require(lr > 0 && std::isfinite(lr), "base.lr", "must be > 0");
  require(finetune_lr > 0 && std::isfinite(finetune_lr), "finetune.lr", "must be > 0");
  require(momentum >= 0 && momentum < 1, "optimizer.momentum", "must be in [0, 1)");
  require(weight_decay >= 0, "optimizer.weight_decay", "must be >= 0");
  require(lr_decay_factor > 0 && lr_decay_factor <= 1, "optimizer.lr_decay_factor", "must be in (0, 1]");
  require(base_decay_interval >= 1, "base.decay_interval", "must be >= 1");
  require(finetune_decay_interval >= 1, "finetune.decay_interval", "must be >= 1");
  require(accumulate >= 1, "optimizer.accumulate", "must be >= 1");
  require(log_interval >= 1, "log_interval", "must be >= 1");
  require(model.pool >= 1, "model.pool", "must be >= 1");
  require(model.pair_objective == PairObjective::softmax, "model.pair_objective",
          "\"binary\" is reserved but not implemented; use \"softmax\"");
  require(model.train_top_n >= 1, "model.train_top_n", "must be >= 1");
  require(model.test_top_n >= 1, "model.test_top_n", "must be >= 1");
  require(model.rpn_batch >= 4, "model.rpn_batch", "must be >= 4");
  require(model.paths.cls_conv || model.paths.cls_fc, "model.paths",
          "classification branch needs cls_conv or cls_fc");
  require(model.paths.reg_conv || model.paths.reg_fc, "model.paths", "regression branch needs reg_conv or reg_fc");
  require(world.support_height == Backbone::kStride * model.pool &&
              world.support_width == Backbone::kStride * model.pool,
          "world.support_size", "support images must map to a pool x pool feature map");
  require(world.height % Backbone::kStride == 0 && world.width % Backbone::kStride == 0, "world.image_size",
          "must be a multiple of 8");
  require(world.min_side >= 8 && world.min_side <= world.max_side, "world.min_side", "must be in [8, max_side]");
  require(world.max_side <= std::min(world.height, world.width), "world.max_side", "must fit in the image");
  require(world.max_objects >= 1, "world.max_objects", "must be >= 1");
  require(world.noise_amplitude >= 0 && world.noise_amplitude < 0.5, "world.noise", "must be in [0, 0.5)");
  require(eval_scenes >= 1, "eval.scenes", "must be >= 1");
  require(eval_repeats >= 1, "eval.repeats", "must be >= 1");
  require(eval_shots >= 1, "eval.shots", "must be >= 1");
  require(score_thresh >= 0 && score_thresh < 1, "eval.score_thresh", "must be in [0, 1)");
  require(nms_iou > 0 && nms_iou < 1, "eval.nms_iou", "must be in (0, 1)");
  require(ablation_fraction > 0 && ablation_fraction <= 1, "ablation_fraction", "must be in (0, 1]");
  require(threads >= 0, "threads", "must be >= 0");
}

EvalOptions TrainConfig::eval_options(Subset subset) const {
  EvalOptions o;
  o.subset = subset;
  o.num_scenes = eval_scenes;
  o.repeats = eval_repeats;
  o.shots = eval_shots;
  o.master_seed = seed;
  o.score_thresh = score_thresh;
  o.nms_iou = nms_iou;
  o.world = world;
  return o;
}

TrainConfig config_from_json(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  TrainConfig c;
  ObjectReader r(root, "");
  r.read("seed", c.seed);
  r.read("num_classes", c.num_classes);
  r.read("num_novel", c.num_novel);
  r.read("log_interval", c.log_interval);
  r.read("ablation_fraction", c.ablation_fraction);
  r.read("threads", c.threads);
  {
    auto b = r.child("base");
    b.read("episodes", c.base_episodes);
    b.read("shots", c.base_shots);
    b.read("m", c.base_m);
    b.read("lr", c.lr);
    b.read("decay_interval", c.base_decay_interval);
    b.reject_unknown();
  }
  {
    auto f = r.child("finetune");
    f.read("episodes", c.finetune_episodes);
    f.read("shots", c.finetune_shots);
    f.read("m", c.finetune_m);
    f.read("lr", c.finetune_lr);
    f.read("decay_interval", c.finetune_decay_interval);
    f.reject_unknown();
  }
  {
    auto o = r.child("optimizer");
    o.read("momentum", c.momentum);
    o.read("weight_decay", c.weight_decay);
    o.read("lr_decay_factor", c.lr_decay_factor);
    o.read("accumulate", c.accumulate);
    o.reject_unknown();
  }
  {
    auto m = r.child("model");
    m.read("pool", c.model.pool);
    m.read("train_top_n", c.model.train_top_n);
    m.read("test_top_n", c.model.test_top_n);
    m.read("rpn_batch", c.model.rpn_batch);
    std::string objective = "softmax";
    m.read("pair_objective", objective);
    if (objective == "softmax") {
      c.model.pair_objective = PairObjective::softmax;
    } else if (objective == "binary") {
      c.model.pair_objective = PairObjective::binary;
    } else {
      field_error("model.pair_objective", "must be \"softmax\" or \"binary\", got \"" + objective + "\"");
    }
    auto p = m.child("paths");
    p.read("cls_conv", c.model.paths.cls_conv);
    p.read("cls_fc", c.model.paths.cls_fc);
    p.read("reg_conv", c.model.paths.reg_conv);
    p.read("reg_fc", c.model.paths.reg_fc);
    p.reject_unknown();
    auto ml = m.child("meta_loss");
    ml.read("cls", c.model.meta_cls);
    ml.read("reg", c.model.meta_reg);
    ml.read("per_support", c.model.meta_per_support);
    ml.reject_unknown();
    m.reject_unknown();
  }
  {
    auto f = r.child("freeze");
    f.read("backbone", c.freeze.backbone);
    f.read("rpn", c.freeze.rpn);
    f.read("dqe", c.freeze.dqe);
    f.read("dag", c.freeze.dag);
    f.read("heads", c.freeze.heads);
    f.read("lambdas", c.freeze.lambdas);
    f.read("meta", c.freeze.meta);
    f.reject_unknown();
  }
  {
    auto e = r.child("eval");
    e.read("scenes", c.eval_scenes);
    e.read("repeats", c.eval_repeats);
    e.read("shots", c.eval_shots);
    e.read("score_thresh", c.score_thresh);
    e.read("nms_iou", c.nms_iou);
    e.reject_unknown();
  }
  {
    auto w = r.child("world");
    w.read("height", c.world.height);
    w.read("width", c.world.width);
    w.read("support_height", c.world.support_height);
    w.read("support_width", c.world.support_width);
    w.read("max_objects", c.world.max_objects);
    w.read("min_side", c.world.min_side);
    w.read("max_side", c.world.max_side);
    w.read("noise", c.world.noise_amplitude);
    w.reject_unknown();
  }
  r.reject_unknown();
  c.model.num_classes = c.num_classes;
  c.validate();
  return c;
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return config_from_json(ss.str());
}

std::string config_to_json(const TrainConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["num_classes"] = c.num_classes;
  j["num_novel"] = c.num_novel;
  j["log_interval"] = c.log_interval;
  j["ablation_fraction"] = c.ablation_fraction;
  j["threads"] = c.threads;
  j["base"] = {{"episodes", c.base_episodes},
               {"shots", c.base_shots},
               {"m", c.base_m},
               {"lr", c.lr},
               {"decay_interval", c.base_decay_interval}};
  j["finetune"] = {{"episodes", c.finetune_episodes},
                   {"shots", c.finetune_shots},
                   {"m", c.finetune_m},
                   {"lr", c.finetune_lr},
                   {"decay_interval", c.finetune_decay_interval}};
  j["optimizer"] = {{"momentum", c.momentum},
                    {"weight_decay", c.weight_decay},
                    {"lr_decay_factor", c.lr_decay_factor},
                    {"accumulate", c.accumulate}};
  j["model"] = {{"pool", c.model.pool},
                {"train_top_n", c.model.train_top_n},
                {"test_top_n", c.model.test_top_n},
                {"rpn_batch", c.model.rpn_batch},
                {"pair_objective", c.model.pair_objective == PairObjective::softmax ? "softmax" : "binary"},
                {"paths",
                 {{"cls_conv", c.model.paths.cls_conv},
                  {"cls_fc", c.model.paths.cls_fc},
                  {"reg_conv", c.model.paths.reg_conv},
                  {"reg_fc", c.model.paths.reg_fc}}},
                {"meta_loss",
                 {{"cls", c.model.meta_cls}, {"reg", c.model.meta_reg}, {"per_support", c.model.meta_per_support}}}};
  j["freeze"] = {{"backbone", c.freeze.backbone}, {"rpn", c.freeze.rpn},         {"dqe", c.freeze.dqe},
                 {"dag", c.freeze.dag},           {"heads", c.freeze.heads},     {"lambdas", c.freeze.lambdas},
                 {"meta", c.freeze.meta}};
  j["eval"] = {{"scenes", c.eval_scenes},
               {"repeats", c.eval_repeats},
               {"shots", c.eval_shots},
               {"score_thresh", c.score_thresh},
               {"nms_iou", c.nms_iou}};
  j["world"] = {{"height", c.world.height},
                {"width", c.world.width},
                {"support_height", c.world.support_height},
                {"support_width", c.world.support_width},
                {"max_objects", c.world.max_objects},
                {"min_side", c.world.min_side},
                {"max_side", c.world.max_side},
                {"noise", c.world.noise_amplitude}};
  return j.dump(2) + "\n";
}

// --- optimizer ----------------------------------------------------------------------

void sgd_step(const ParamList& params, SgdState& state, double lr, double momentum, double weight_decay) {
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) {
      throw std::logic_error("sgd_step: trainable parameter '" + p.name + "' has no gradient");
    }
  }
  for (const auto& p : params) {
    Tensor t = p.tensor;
    auto& v = state.velocity[p.name];
    if (v.empty()) v.assign(t.numel(), 0.0);
    const auto g = t.grad();
    auto x = t.mutable_values();
    for (std::size_t i = 0; i < v.size(); ++i) {
      v[i] = momentum * v[i] + g[i] + weight_decay * x[i];
      x[i] -= lr * v[i];
    }
    t.clear_grad();
  }
}

std::string format_log_row(const LogRow& r) {
  std::ostringstream os;
  os << std::setprecision(17) << r.iteration << ',' << r.lr << ',' << r.rpn_cls << ',' << r.rpn_reg << ','
     << r.rcnn_cls << ',' << r.rcnn_reg << ',' << r.meta_cls << ',' << r.meta_reg << ',' << r.total << ','
     << r.lambda_cls_conv << ',' << r.lambda_cls_fc << ',' << r.lambda_reg_conv << ',' << r.lambda_reg_fc;
  return os.str();
}

// --- checkpoints --------------------------------------------------------------------

namespace {

constexpr const char* kIterationKey = "ckpt.iteration";
constexpr const char* kConfigKey = "ckpt.config_json";
constexpr const char* kMomentumPrefix = "momentum/";

ModelConfig model_config(const TrainConfig& c) {
  ModelConfig m = c.model;
  m.num_classes = c.num_classes;
  return m;
}

std::uint64_t model_seed(const TrainConfig& c) { return derive_seed(c.seed, 0x3D31); }

}  // namespace

Checkpoint make_checkpoint(const Model& model, const SgdState& state, long iteration, const TrainConfig& config) {
  Checkpoint ck;
  for (const auto& p : model.parameters()) ck.parameters.push_back({p.name, p.tensor.detach().clone()});
  for (const auto& [name, v] : state.velocity) {
    ck.momentum.push_back({name, Tensor::from({v.size()}, v)});
  }
  ck.iteration = iteration;
  ck.config_json = config_to_json(config);
  return ck;
}

TrainConfig checkpoint_config(const Checkpoint& ckpt) {
  try {
    return config_from_json(ckpt.config_json);
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint carries an invalid config: ") + e.what());
  }
}

Model model_from_checkpoint(const Checkpoint& ckpt, const TrainConfig& config) {
  Model m = initial_model(config);
  try {
    assign_parameters(m, ckpt.parameters);
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(e.what());
  }
  return m;
}

Model model_from_checkpoint(const Checkpoint& ckpt) { return model_from_checkpoint(ckpt, checkpoint_config(ckpt)); }

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  std::vector<NamedTensor> out(ckpt.parameters);
  for (const auto& m : ckpt.momentum) out.push_back({kMomentumPrefix + m.name, m.tensor});
  out.push_back({kIterationKey, Tensor::scalar(static_cast<double>(ckpt.iteration))});
  std::vector<double> bytes;
  for (unsigned char ch : ckpt.config_json) bytes.push_back(ch);
  if (bytes.empty()) throw CheckpointError("checkpoint has no config snapshot");
  const std::size_t n = bytes.size();
  out.push_back({kConfigKey, Tensor::from({n}, std::move(bytes))});
  write_archive(path, out);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw CheckpointError("checkpoint not found: " + path.string());
  std::vector<NamedTensor> items;
  try {
    items = read_archive(path);
  } catch (const ArchiveError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
  Checkpoint ck;
  bool have_iter = false, have_cfg = false;
  const std::string mp = kMomentumPrefix;
  for (auto& it : items) {
    if (it.name == kIterationKey) {
      ck.iteration = static_cast<long>(it.tensor.values()[0]);
      have_iter = true;
    } else if (it.name == kConfigKey) {
      for (double b : it.tensor.values()) {
        if (b < 0 || b > 255 || b != std::floor(b)) throw CheckpointError("tensor '" + it.name + "' is corrupt");
        ck.config_json.push_back(static_cast<char>(static_cast<unsigned char>(b)));
      }
      have_cfg = true;
    } else if (it.name.compare(0, mp.size(), mp) == 0) {
      ck.momentum.push_back({it.name.substr(mp.size()), it.tensor});
    } else {
      ck.parameters.push_back(std::move(it));
    }
  }
  if (!have_iter) throw CheckpointError(path.string() + ": missing tensor '" + kIterationKey + "'");
  if (!have_cfg) throw CheckpointError(path.string() + ": missing tensor '" + kConfigKey + "'");
  return ck;
}

// --- training -----------------------------------------------------------------------

std::uint64_t episode_seed(std::uint64_t master_seed, Phase phase, long index) {
  const std::uint64_t tag = phase == Phase::base ? 0xBA5E'0000'0000ull : 0xF1E7'0000'0000ull;
  return derive_seed(master_seed, tag + static_cast<std::uint64_t>(index));
}

bool is_standard_shot_count(int shots) { return shots == 1 || shots == 2 || shots == 3 || shots == 5 || shots == 10; }

SupportPool finetune_support_pool(const TrainConfig& config, int shots) {
  Rng rng(derive_seed(config.seed, 0x9001'0000ull + static_cast<std::uint64_t>(shots)));
  const auto all = config.split().all_classes();
  return sample_support_pool(all, shots, rng, config.world);
}

namespace {

int worker_threads(const TrainConfig& config) {
  int n = config.threads;
  if (const char* env = std::getenv("AFD_THREADS")) {
    char* end = nullptr;
    const long cap = std::strtol(env, &end, 10);
    if (end != env && cap >= 0) n = std::min<long>(n, cap);
  }
  const unsigned hw = std::thread::hardware_concurrency();
  if (hw > 0) n = std::min<int>(n, static_cast<int>(hw) - 1);
  return std::max(n, 0);
}

/// Episodes in index order, optionally built ahead by worker threads. Each
/// episode depends only on its own seed, so the stream is identical for any
/// worker count.
class EpisodeStream {
 public:
  EpisodeStream(std::function<Episode(long)> make, long count, int workers)
      : make_(std::move(make)), count_(count), depth_(workers > 0 ? 2 * workers : 0) {}

  Episode next() {
    if (depth_ == 0) return make_(consumed_++);
    while (issued_ < count_ && static_cast<long>(queue_.size()) < depth_) {
      queue_.push_back(std::async(std::launch::async, make_, issued_++));
    }
    Episode ep = queue_.front().get();
    queue_.pop_front();
    ++consumed_;
    return ep;
  }

 private:
  std::function<Episode(long)> make_;
  long count_;
  long depth_;
  long issued_ = 0;
  long consumed_ = 0;
  std::deque<std::future<Episode>> queue_;
};

struct PhasePlan {
  Phase phase = Phase::base;
  int episodes = 0;
  double lr = 0.0;
  int decay_interval = 1;
  int shots = 1;
  int m = 1;
  const SupportPool* pool = nullptr;
  long first_iteration = 0;
};

/// Parameters outside the trainable set stop requiring grad for the phase.
class TrainableScope {
 public:
  TrainableScope(const Model& model, const ParamList& trainable) : all_(model.parameters()) {
    std::set<std::string> names;
    for (const auto& p : trainable) names.insert(p.name);
    for (auto& p : all_) p.tensor.set_requires_grad(names.count(p.name) > 0);
  }
  ~TrainableScope() {
    for (auto& p : all_) {
      p.tensor.clear_grad();
      p.tensor.set_requires_grad(true);
    }
  }

 private:
  ParamList all_;
};

void run_phase(Model& model, SgdState& state, const TrainConfig& config, const PhasePlan& plan, const LogSink& log) {
  const ClassSplit split = config.split();
  const ParamList trainable = model.trainable(config.freeze);
  TrainableScope scope(model, trainable);
  Tape::current().reset();

  auto make = [&config, &split, plan](long i) {
    Rng rng(episode_seed(config.seed, plan.phase, i));
    EpisodeRequest req;
    req.phase = plan.phase;
    req.m = plan.m;
    req.shots = plan.shots;
    req.fixed_support = plan.pool;
    if (plan.phase == Phase::finetune) req.query_pool = i % 2 == 0 ? QueryPool::novel : QueryPool::base;
    return build_episode(req, split, rng, config.world);
  };
  EpisodeStream stream(make, plan.episodes, worker_threads(config));

  for (long i = 0; i < plan.episodes; ++i) {
    const std::uint64_t seed = episode_seed(config.seed, plan.phase, i);
    const long iteration = plan.first_iteration + i;
    const double lr = plan.lr * std::pow(config.lr_decay_factor, static_cast<double>(i / plan.decay_interval));
    try {
      const Episode ep = stream.next();
      Rng plan_rng(derive_seed(seed, 0xA11C));
      const TrainingPlan tp = make_training_plan(model, ep, plan_rng);
      const LossReport rep = episode_loss(model, ep, tp);
      if (!std::isfinite(rep.total.item())) throw NumericError("non-finite loss");
      if (log && iteration % config.log_interval == 0) {
        log({iteration, lr, rep.rpn_cls.item(), rep.rpn_reg.item(), rep.rcnn_cls.item(), rep.rcnn_reg.item(),
             rep.meta_cls.item(), rep.meta_reg.item(), rep.total.item(), model.lambdas.conv_cls.item(),
             model.lambdas.fc_cls.item(), model.lambdas.conv_reg.item(), model.lambdas.fc_reg.item()});
      }
      backward(config.accumulate > 1 ? ops::scale(rep.total, 1.0 / config.accumulate) : rep.total);
      if ((i + 1) % config.accumulate == 0 || i + 1 == plan.episodes) {
        sgd_step(trainable, state, lr, config.momentum, config.weight_decay);
      }
    } catch (const NumericError& e) {
      Tape::current().reset();
      std::ostringstream os;
      os << "training aborted at iteration " << iteration << " (episode seed " << seed << "): " << e.what();
      throw TrainingAborted(os.str(), iteration, seed);
    }
  }
}

}  // namespace

Model initial_model(const TrainConfig& config) { return Model::init(model_config(config), model_seed(config)); }

Checkpoint train_base(const TrainConfig& config, const LogSink& log) {
  config.validate();
  Model model = initial_model(config);
  SgdState state;
  PhasePlan plan;
  plan.phase = Phase::base;
  plan.episodes = config.base_episodes;
  plan.lr = config.lr;
  plan.decay_interval = config.base_decay_interval;
  plan.shots = config.base_shots;
  plan.m = config.base_m;
  run_phase(model, state, config, plan, log);
  return make_checkpoint(model, state, config.base_episodes, config);
}

Checkpoint finetune(const Checkpoint& base, int shots, const TrainConfig& config, const LogSink& log) {
  config.validate();
  if (shots < 1) throw ConfigError("config field 'finetune.shots': K must be >= 1");
  Model model = model_from_checkpoint(base, config);
  SgdState state;
  const SupportPool pool = finetune_support_pool(config, shots);
  PhasePlan plan;
  plan.phase = Phase::finetune;
  plan.episodes = config.finetune_episodes;
  plan.lr = config.finetune_lr;
  plan.decay_interval = config.finetune_decay_interval;
  plan.shots = shots;
  plan.m = config.finetune_m;
  plan.pool = &pool;
  plan.first_iteration = base.iteration;
  run_phase(model, state, config, plan, log);
  return make_checkpoint(model, state, base.iteration + config.finetune_episodes, config);
}

// --- ablations ----------------------------------------------------------------------

std::vector<AblationCell> table4_cells() {
  auto cell = [](const char* name, bool cc, bool cf, bool rc, bool rf) {
    AblationCell c;
    c.name = name;
    c.paths = {cc, cf, rc, rf};
    return c;
  };
  return {
      cell("cls-fc+reg-conv", false, true, true, false),
      cell("cls-conv+reg-fc", true, false, false, true),
      cell("cls-conv+reg-conv", true, false, true, false),
      cell("cls-fc+reg-fc", false, true, false, true),
      cell("cls-both+reg-fc", true, true, false, true),
      cell("cls-both+reg-conv", true, true, true, false),
      cell("cls-conv+reg-both", true, false, true, true),
      cell("full", true, true, true, true),
  };
}

std::vector<AblationCell> table5_cells() {
  auto cell = [](const char* name, bool mc, bool mr) {
    AblationCell c;
    c.name = name;
    c.meta_cls = mc;
    c.meta_reg = mr;
    return c;
  };
  return {cell("no-meta", false, false), cell("meta-cls", true, false), cell("meta-reg", false, true),
          cell("full", true, true)};
}

TrainConfig ablation_config(const TrainConfig& base, const AblationCell& cell) {
  TrainConfig c = base;
  c.model.paths = cell.paths;
  c.model.meta_cls = cell.meta_cls;
  c.model.meta_reg = cell.meta_reg;
  auto scaled = [&](int n) { return std::max(1, static_cast<int>(std::lround(n * base.ablation_fraction))); };
  c.base_episodes = scaled(base.base_episodes);
  c.finetune_episodes = scaled(base.finetune_episodes);
  c.base_decay_interval = scaled(base.base_decay_interval);
  c.finetune_decay_interval = scaled(base.finetune_decay_interval);
  c.validate();
  return c;
}

}  // namespace afd
