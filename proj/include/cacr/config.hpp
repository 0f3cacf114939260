#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cacr/data.hpp"
#include "cacr/errors.hpp"
#include "cacr/eval.hpp"
#include "cacr/losses.hpp"
#include "cacr/trainer.hpp"

namespace cacr {

// ---------------------------------------------------------------------------
// INI-style config text: [section] headers, key = value pairs, '#' comments.
// Unknown sections or keys are hard errors so hyperparameter typos cannot
// pass silently.
// ---------------------------------------------------------------------------

namespace detail {

inline std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

}  // namespace detail

class IniDocument {
 public:
  static IniDocument parse(const std::string& text, const std::string& origin) {
    IniDocument doc;
    std::istringstream in(text);
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const std::string t = detail::trim(line);
      if (t.empty()) continue;
      if (t.front() == '[') {
        if (t.back() != ']')
          throw ConfigParse(origin + ":" + std::to_string(lineno) + ": unterminated section");
        section = detail::trim(std::string_view(t).substr(1, t.size() - 2));
        continue;
      }
      const auto eq = t.find('=');
      if (eq == std::string::npos)
        throw ConfigParse(origin + ":" + std::to_string(lineno) + ": expected key = value");
      const std::string key = detail::trim(std::string_view(t).substr(0, eq));
      const std::string value = detail::trim(std::string_view(t).substr(eq + 1));
      if (key.empty())
        throw ConfigParse(origin + ":" + std::to_string(lineno) + ": empty key");
      if (!doc.values_.emplace(section + "." + key, value).second)
        throw ConfigParse(origin + ":" + std::to_string(lineno) + ": duplicate key '" + key +
                          "' in [" + section + "]");
      continue;
    }
    return doc;
  }

  static IniDocument parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigParse("cannot open config file: " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return parse(buf.str(), path);
  }

  bool has(const std::string& section, const std::string& key) const {
    return values_.count(section + "." + key) > 0;
  }

  std::string get(const std::string& section, const std::string& key) {
    const std::string full = section + "." + key;
    const auto it = values_.find(full);
    if (it == values_.end()) throw ConfigParse("missing required key '" + full + "'");
    consumed_.insert(full);
    return it->second;
  }

  std::string get_or(const std::string& section, const std::string& key,
                     const std::string& fallback) {
    const std::string full = section + "." + key;
    const auto it = values_.find(full);
    if (it == values_.end()) return fallback;
    consumed_.insert(full);
    return it->second;
  }

  double get_double(const std::string& section, const std::string& key, double fallback) {
    const std::string full = section + "." + key;
    const auto it = values_.find(full);
    if (it == values_.end()) return fallback;
    consumed_.insert(full);
    try {
      return parse_double(it->second);
    } catch (const IoError&) {
      throw ConfigParse("key '" + full + "': expected a number, got '" + it->second + "'");
    }
  }

  std::uint64_t get_count(const std::string& section, const std::string& key,
                          std::uint64_t fallback) {
    const double v = get_double(section, key, static_cast<double>(fallback));
    if (v < 0.0 || v != std::floor(v))
      throw ConfigParse("key '" + section + "." + key + "': expected a nonnegative integer");
    return static_cast<std::uint64_t>(v);
  }

  bool get_bool(const std::string& section, const std::string& key, bool fallback) {
    const std::string v = get_or(section, key, fallback ? "true" : "false");
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigParse("key '" + section + "." + key + "': expected true/false");
  }

  // Hard error on anything never consumed.
  void reject_unconsumed() const {
    for (const auto& [full, value] : values_)
      if (!consumed_.count(full)) throw ConfigParse("unknown key '" + full + "'");
  }

 private:
  std::map<std::string, std::string> values_;  // "section.key" -> value
  std::set<std::string> consumed_;
};

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

struct ExperimentConfig {
  SyntheticSpec data;
  ImbalanceRule imbalance;
  AugmentationSpec augment;
  MlpSpec encoder;
  TrainConfig train;
  ProbeConfig probe;
  std::size_t knn_k = 5;
  std::size_t probe_train_per_class = 0;  // 0 -> data.samples_per_class
  std::size_t probe_test_per_class = 0;   // 0 -> max(1, samples_per_class / 5)
  std::string out_dir = "out";
  std::uint64_t seed = 0;
  std::uint64_t config_hash = 0;
};

namespace detail {

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  std::stringstream in(s);
  while (std::getline(in, cur, ',')) {
    cur = trim(cur);
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

inline LossKind parse_loss_kind(const std::string& s) {
  if (s == "cacr") return LossKind::kCacr;
  if (s == "ca") return LossKind::kCaOnly;
  if (s == "cr") return LossKind::kCrOnly;
  if (s == "cacr_rbf") return LossKind::kCacrRbf;
  if (s == "cr_rbf") return LossKind::kCrRbf;
  if (s == "uaur") return LossKind::kUaur;
  if (s == "infonce") return LossKind::kInfoNce;
  if (s == "multi_infonce") return LossKind::kMultiPositiveInfoNce;
  if (s == "align_uniform") return LossKind::kAlignUniform;
  if (s == "cacr_margin") return LossKind::kCacrMargin;
  throw ConfigParse("unknown loss '" + s + "'");
}

inline const char* loss_kind_name(LossKind k) {
  switch (k) {
    case LossKind::kCacr: return "cacr";
    case LossKind::kCaOnly: return "ca";
    case LossKind::kCrOnly: return "cr";
    case LossKind::kCacrRbf: return "cacr_rbf";
    case LossKind::kCrRbf: return "cr_rbf";
    case LossKind::kUaur: return "uaur";
    case LossKind::kInfoNce: return "infonce";
    case LossKind::kMultiPositiveInfoNce: return "multi_infonce";
    case LossKind::kAlignUniform: return "align_uniform";
    case LossKind::kCacrMargin: return "cacr_margin";
  }
  return "?";
}

}  // namespace detail

// Canonical dump of every semantic field (out_dir excluded: it does not
// change what the run computes). The config hash embedded in all outputs is
// the FNV-1a of this string.
inline std::string canonical_description(const ExperimentConfig& cfg) {
  std::ostringstream os;
  os << "data.n_classes=" << cfg.data.n_classes << '\n'
     << "data.dim=" << cfg.data.dim << '\n'
     << "data.samples_per_class=" << cfg.data.samples_per_class << '\n'
     << "data.within_class_std=" << to_decimal_string(cfg.data.within_class_std) << '\n';
  os << "data.class_means=";
  for (double v : cfg.data.class_means.data()) os << to_decimal_string(v) << ',';
  os << '\n';
  os << "data.imbalance=" << static_cast<int>(cfg.imbalance.kind) << '\n'
     << "data.imbalance_rho=" << to_decimal_string(cfg.imbalance.rho) << '\n'
     << "augment.noise_std=" << to_decimal_string(cfg.augment.noise_std) << '\n'
     << "augment.rotation_max_angle=" << to_decimal_string(cfg.augment.rotation_max_angle) << '\n'
     << "augment.scale_jitter=" << to_decimal_string(cfg.augment.scale_jitter) << '\n';
  os << "encoder.widths=";
  for (std::size_t w : cfg.encoder.layer_widths) os << w << ',';
  os << '\n' << "encoder.activation=" << static_cast<int>(cfg.encoder.activation) << '\n';
  const auto& t = cfg.train;
  os << "train.loss=" << detail::loss_kind_name(t.loss.kind) << '\n'
     << "train.t_pos=" << to_decimal_string(t.loss.temps.t_pos) << '\n'
     << "train.t_neg=" << to_decimal_string(t.loss.temps.t_neg) << '\n'
     << "train.tau=" << to_decimal_string(t.loss.temps.tau) << '\n'
     << "train.cost=" << static_cast<int>(t.loss.cost.variant) << '\n'
     << "train.cost_t_rbf=" << to_decimal_string(t.loss.cost.t_rbf) << '\n'
     << "train.t_rbf=" << to_decimal_string(t.loss.t_rbf) << '\n'
     << "train.margin=" << to_decimal_string(t.loss.margin) << '\n'
     << "train.align_exponent=" << to_decimal_string(t.loss.align_exponent) << '\n'
     << "train.pos_polarity=" << static_cast<int>(t.loss.polarity.pos_sign) << '\n'
     << "train.neg_polarity=" << static_cast<int>(t.loss.polarity.neg_sign) << '\n'
     << "train.flow_pos=" << t.loss.flow.through_pos_weights << '\n'
     << "train.flow_neg=" << t.loss.flow.through_neg_weights << '\n'
     << "train.M=" << t.batch_size << '\n'
     << "train.K=" << t.positives_per_query << '\n'
     << "train.epochs=" << t.epochs << '\n'
     << "train.lr=" << to_decimal_string(t.lr) << '\n';
  os << "train.lr_schedule=";
  for (const auto& e : t.lr_schedule) os << e.epoch << ':' << to_decimal_string(e.factor) << ',';
  os << '\n'
     << "train.sgd_momentum=" << to_decimal_string(t.sgd_momentum) << '\n'
     << "train.weight_decay=" << to_decimal_string(t.weight_decay) << '\n'
     << "train.mode=" << static_cast<int>(t.mode) << '\n'
     << "train.queue_size=" << t.queue_size << '\n'
     << "train.ema_momentum=" << to_decimal_string(t.ema_momentum) << '\n'
     << "train.val_fraction=" << to_decimal_string(t.val_fraction) << '\n'
     << "eval.probe_epochs=" << cfg.probe.epochs << '\n'
     << "eval.probe_lr=" << to_decimal_string(cfg.probe.lr) << '\n'
     << "eval.probe_l2=" << to_decimal_string(cfg.probe.l2_reg) << '\n'
     << "eval.knn_k=" << cfg.knn_k << '\n'
     << "eval.probe_train_per_class=" << cfg.probe_train_per_class << '\n'
     << "eval.probe_test_per_class=" << cfg.probe_test_per_class << '\n'
     << "run.seed=" << cfg.seed << '\n';
  return os.str();
}

inline void rehash(ExperimentConfig& cfg) {
  cfg.config_hash = detail::fnv1a64(canonical_description(cfg));
}

inline std::string hash_hex(std::uint64_t h) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[h & 0xF];
    h >>= 4;
  }
  return s;
}

inline ExperimentConfig experiment_config_from_ini(IniDocument doc) {
  ExperimentConfig cfg;

  // [data]
  cfg.data.n_classes = doc.get_count("data", "n_classes", 4);
  cfg.data.dim = doc.get_count("data", "dim", 2);
  cfg.data.samples_per_class = doc.get_count("data", "samples_per_class", 500);
  cfg.data.within_class_std = doc.get_double("data", "within_class_std", 0.25);
  const double radius = doc.get_double("data", "mean_radius", 3.0);
  const std::string placement = doc.get_or("data", "means", "circle");
  if (placement != "circle") throw ConfigParse("data.means: only 'circle' is supported");
  cfg.data.class_means = SyntheticSpec::circle_means(cfg.data.n_classes, cfg.data.dim, radius);

  const std::string imb = doc.get_or("data", "imbalance", "balanced");
  if (imb == "balanced") cfg.imbalance.kind = ImbalanceKind::kBalanced;
  else if (imb == "linear") cfg.imbalance.kind = ImbalanceKind::kLinearDecay;
  else if (imb == "exponential") cfg.imbalance.kind = ImbalanceKind::kExponentialDecay;
  else throw ConfigParse("data.imbalance: expected balanced/linear/exponential");
  cfg.imbalance.rho = doc.get_double("data", "imbalance_rho", 0.1);

  // [augment]
  cfg.augment.noise_std = doc.get_double("augment", "noise_std", 0.1);
  cfg.augment.rotation_max_angle = doc.get_double("augment", "rotation_max_angle", 0.0);
  cfg.augment.scale_jitter = doc.get_double("augment", "scale_jitter", 0.0);

  // [encoder]
  const auto widths = detail::split_list(doc.get_or("encoder", "widths", "2,64,64,8"));
  cfg.encoder.layer_widths.clear();
  for (const auto& w : widths)
    cfg.encoder.layer_widths.push_back(static_cast<std::size_t>(parse_double(w)));
  const std::string act = doc.get_or("encoder", "activation", "relu");
  if (act == "relu") cfg.encoder.activation = Activation::kRelu;
  else if (act == "tanh") cfg.encoder.activation = Activation::kTanh;
  else throw ConfigParse("encoder.activation: expected relu or tanh");

  // [train]
  cfg.train.loss.kind = detail::parse_loss_kind(doc.get_or("train", "loss", "cacr"));
  cfg.train.loss.temps.t_pos = doc.get_double("train", "t_pos", 1.0);
  cfg.train.loss.temps.t_neg = doc.get_double("train", "t_neg", 2.0);
  cfg.train.loss.temps.tau = doc.get_double("train", "tau", 0.19);
  const std::string cost = doc.get_or("train", "cost", "sq_euclidean");
  if (cost == "sq_euclidean") cfg.train.loss.cost = CostKind::squared_euclidean();
  else if (cost == "neg_inner") cfg.train.loss.cost = CostKind::neg_inner_product();
  else if (cost == "rbf")
    cfg.train.loss.cost = CostKind::rbf(doc.get_double("train", "cost_t_rbf", 1.0));
  else throw ConfigParse("train.cost: expected sq_euclidean/neg_inner/rbf");
  cfg.train.loss.t_rbf = doc.get_double("train", "t_rbf", 1.0);
  cfg.train.loss.margin = doc.get_double("train", "margin", 0.0);
  cfg.train.loss.align_exponent = doc.get_double("train", "align_exponent", 2.0);
  const std::string pos_sign = doc.get_or("train", "pos_polarity", "plus");
  const std::string neg_sign = doc.get_or("train", "neg_polarity", "minus");
  if (pos_sign != "plus" && pos_sign != "minus")
    throw ConfigParse("train.pos_polarity: expected plus or minus");
  if (neg_sign != "plus" && neg_sign != "minus")
    throw ConfigParse("train.neg_polarity: expected plus or minus");
  cfg.train.loss.polarity.pos_sign =
      pos_sign == "plus" ? DistanceSign::kPlusD : DistanceSign::kMinusD;
  cfg.train.loss.polarity.neg_sign =
      neg_sign == "plus" ? DistanceSign::kPlusD : DistanceSign::kMinusD;
  cfg.train.loss.flow.through_pos_weights =
      doc.get_bool("train", "grad_through_pos_weights", false);
  cfg.train.loss.flow.through_neg_weights =
      doc.get_bool("train", "grad_through_neg_weights", true);

  cfg.train.batch_size = doc.get_count("train", "M", 64);
  cfg.train.positives_per_query = doc.get_count("train", "K", 1);
  cfg.train.epochs = doc.get_count("train", "epochs", 200);
  cfg.train.lr = doc.get_double("train", "lr", 0.0);
  const std::string decay_epochs = doc.get_or("train", "lr_decay_epochs", "");
  if (!decay_epochs.empty()) {
    const double factor = doc.get_double("train", "lr_decay_factor", 0.1);
    for (const auto& e : detail::split_list(decay_epochs))
      cfg.train.lr_schedule.push_back(
          {static_cast<std::size_t>(parse_double(e)), factor});
  }
  cfg.train.sgd_momentum = doc.get_double("train", "sgd_momentum", 0.9);
  cfg.train.weight_decay = doc.get_double("train", "weight_decay", 1e-4);
  const std::string mode = doc.get_or("train", "mode", "simclr");
  if (mode == "simclr") cfg.train.mode = TrainMode::kSimClrStyle;
  else if (mode == "momentum_queue") cfg.train.mode = TrainMode::kMomentumQueue;
  else throw ConfigParse("train.mode: expected simclr or momentum_queue");
  cfg.train.queue_size = doc.get_count("train", "queue_size", 1024);
  cfg.train.ema_momentum = doc.get_double("train", "ema_momentum", 0.99);
  cfg.train.val_fraction = doc.get_double("train", "val_fraction", 0.2);

  // [eval]
  cfg.probe.epochs = doc.get_count("eval", "probe_epochs", 200);
  cfg.probe.lr = doc.get_double("eval", "probe_lr", 0.5);
  cfg.probe.l2_reg = doc.get_double("eval", "probe_l2", 1e-4);
  cfg.knn_k = doc.get_count("eval", "knn_k", 5);
  cfg.probe_train_per_class = doc.get_count("eval", "probe_train_per_class", 0);
  cfg.probe_test_per_class = doc.get_count("eval", "probe_test_per_class", 0);

  // [run]
  cfg.out_dir = doc.get_or("run", "out_dir", "out");
  cfg.seed = doc.get_count("run", "seed", 0);
  cfg.train.seed = cfg.seed;

  doc.reject_unconsumed();
  rehash(cfg);

  cfg.data.validate();
  cfg.imbalance.validate();
  cfg.augment.validate();
  cfg.encoder.validate();
  cfg.train.validate();
  cfg.probe.validate();
  if (cfg.encoder.input_dim() != cfg.data.dim)
    throw ConfigParse("encoder.widths: first width must equal data.dim");
  return cfg;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  return experiment_config_from_ini(IniDocument::parse_file(path));
}

// Balanced datasets used by the probe protocol (standard train/test splits
// stay balanced even when pre-training data is imbalanced, so an imbalanced
// run evaluates under label shift).
inline LabeledDataset pretraining_dataset(const ExperimentConfig& cfg) {
  Rng data_rng = Rng(cfg.seed).split("data");
  LabeledDataset ds = generate(cfg.data, data_rng);
  Rng imb_rng = Rng(cfg.seed).split("imbalance");
  return subsample_imbalanced(ds, cfg.imbalance, imb_rng);
}

inline LabeledDataset probe_train_dataset(const ExperimentConfig& cfg) {
  SyntheticSpec spec = cfg.data;
  if (cfg.probe_train_per_class > 0) spec.samples_per_class = cfg.probe_train_per_class;
  Rng rng = Rng(cfg.seed).split("probe_train");
  return generate(spec, rng);
}

inline LabeledDataset probe_test_dataset(const ExperimentConfig& cfg) {
  SyntheticSpec spec = cfg.data;
  spec.samples_per_class = cfg.probe_test_per_class > 0
                               ? cfg.probe_test_per_class
                               : std::max<std::size_t>(1, cfg.data.samples_per_class / 5);
  Rng rng = Rng(cfg.seed).split("probe_test");
  return generate(spec, rng);
}

}  // namespace cacr
