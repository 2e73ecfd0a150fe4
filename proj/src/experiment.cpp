#include "gcnn/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>

#include "gcnn/errors.hpp"
#include "gcnn/optim.hpp"
#include "gcnn/seed.hpp"

namespace gcnn {
namespace {

constexpr std::uint64_t kSaltShuffle = 0x5348;
constexpr std::uint64_t kNoFold = 0xffffffffULL;

template <typename T>
Tensor<T> batch_tensor(const Dataset& data, std::span<const std::size_t> records) {
  const std::size_t d = data.manifest.dim, vox = d * d * d;
  Tensor<T> x({records.size(), 1, d, d, d});
  for (std::size_t b = 0; b < records.size(); ++b) {
    const auto& v = data.volumes.at(records[b]);
    std::transform(v.begin(), v.end(), x.data() + b * vox, [](float f) { return static_cast<T>(f); });
  }
  return x;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

nlohmann::json confusion_json(const std::vector<std::vector<std::size_t>>& c) { return c; }

}  // namespace

void TrainConfig::validate() const {
  if (!(lr > 0)) throw ShapeError("learning rate must be positive");
  if (batch_size == 0) throw ShapeError("batch size must be >= 1");
  if (epochs == 0) throw ShapeError("epochs must be >= 1");
  network.validate();
}

nlohmann::json TrainConfig::to_json() const {
  std::vector<std::string> sets;
  for (auto s : test_sets) sets.push_back(to_string(s));
  return {{"network", network.to_json()},
          {"lr", lr},
          {"beta1", beta1},
          {"beta2", beta2},
          {"epsilon", epsilon},
          {"batch_size", batch_size},
          {"epochs", epochs},
          {"seed", seed},
          {"precision", to_string(precision)},
          {"manifest", manifest},
          {"test_sets", sets}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  if (j.contains("network")) c.network = NetworkSpec::from_json(j.at("network"));
  c.lr = j.value("lr", c.lr);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.epsilon = j.value("epsilon", c.epsilon);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.seed = j.value("seed", c.seed);
  if (j.contains("precision")) c.precision = parse_precision(j.at("precision").get<std::string>());
  c.manifest = j.value("manifest", c.manifest);
  if (j.contains("test_sets")) {
    c.test_sets.clear();
    for (const auto& s : j.at("test_sets")) c.test_sets.push_back(parse_set_kind(s.get<std::string>()));
  }
  return c;
}

std::uint64_t fold_seed(std::uint64_t seed, std::optional<std::size_t> held_out) {
  return derive_seed(seed, {held_out ? *held_out : kNoFold});
}

template <typename T>
Network<T> train(const TrainConfig& cfg, const Dataset& data, std::optional<std::size_t> held_out, TrainLog* log,
                 const EpochCallback& on_epoch) {
  cfg.validate();
  if (cfg.network.classes != data.manifest.classes)
    throw ShapeError("network has " + std::to_string(cfg.network.classes) + " classes, dataset has " +
                     std::to_string(data.manifest.classes));
  if (cfg.network.in_channels != 1) throw ShapeError("volumes have a single channel");
  auto order = data.select(SetKind::normal, held_out, true);
  if (order.empty()) throw ShapeError("empty training set");

  const auto t0 = std::chrono::steady_clock::now();
  const std::uint64_t init = fold_seed(cfg.seed, held_out);
  Network<T> net(cfg.network, init);
  AdamState<T> adam;
  adam.config = {cfg.lr, cfg.beta1, cfg.beta2, cfg.epsilon};
  std::mt19937_64 rng(derive_seed(init, {kSaltShuffle}));
  TrainLog local;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::span<const std::size_t> batch(order.data() + start, std::min(cfg.batch_size, order.size() - start));
      std::vector<std::size_t> labels;
      for (auto r : batch) labels.push_back(data.manifest.records[r].label);
      auto loss = ad::softmax_xent<T>(net.forward(batch_tensor<T>(data, batch)), labels);
      const double value = loss->value[0];
      if (!std::isfinite(value))
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(start / cfg.batch_size));
      net.zero_grad();
      ad::backward(loss);
      adam_step(net.parameters(), adam);
      total += value * static_cast<double>(batch.size());
    }
    local.epoch_loss.push_back(total / static_cast<double>(order.size()));
    if (on_epoch) on_epoch(epoch, local.epoch_loss.back());
  }
  net.zero_grad();
  local.seconds = seconds_since(t0);
  if (log) *log = std::move(local);
  return net;
}

nlohmann::json EvalResult::to_json() const {
  return {{"set", to_string(set)},
          {"fold", fold ? nlohmann::json(*fold) : nlohmann::json(nullptr)},
          {"accuracy", accuracy},
          {"confusion", confusion_json(confusion)},
          {"ids", ids},
          {"labels", labels},
          {"predictions", predictions}};
}

EvalResult EvalResult::from_json(const nlohmann::json& j) {
  try {
    EvalResult r;
    r.set = parse_set_kind(j.at("set").get<std::string>());
    if (!j.at("fold").is_null()) r.fold = j.at("fold").get<std::size_t>();
    r.accuracy = j.at("accuracy").get<double>();
    r.confusion = j.at("confusion").get<std::vector<std::vector<std::size_t>>>();
    r.ids = j.value("ids", std::vector<std::string>{});
    r.labels = j.value("labels", std::vector<std::size_t>{});
    r.predictions = j.value("predictions", std::vector<std::size_t>{});
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed evaluation result: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("malformed evaluation result: ") + e.what());
  }
}

std::size_t argmax(std::span<const double> scores) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i)
    if (scores[i] > scores[best]) best = i;
  return best;
}

template <typename T>
EvalResult evaluate(const Network<T>& net, const Dataset& data, SetKind set, std::optional<std::size_t> fold,
                    std::size_t batch_size) {
  if (!data.has_set(set)) throw FormatError("dataset has no " + to_string(set) + " set");
  const auto records = data.select(set, fold);
  if (records.empty()) throw FormatError("fold " + std::to_string(fold.value_or(0)) + " is empty or absent");
  const std::size_t n = net.spec().classes;
  if (n != data.manifest.classes) throw ShapeError("class count mismatch between model and dataset");
  batch_size = std::max<std::size_t>(batch_size, 1);

  EvalResult r;
  r.set = set;
  r.fold = fold;
  r.confusion.assign(n, std::vector<std::size_t>(n, 0));
  std::size_t correct = 0;
  for (std::size_t start = 0; start < records.size(); start += batch_size) {
    const std::span<const std::size_t> batch(records.data() + start, std::min(batch_size, records.size() - start));
    const auto logits = net.forward(batch_tensor<T>(data, batch))->value;
    if (!logits.all_finite()) throw NumericError("non-finite logits during evaluation");
    for (std::size_t b = 0; b < batch.size(); ++b) {
      std::vector<double> row(n);
      for (std::size_t c = 0; c < n; ++c) row[c] = static_cast<double>(logits[b * n + c]);
      const std::size_t pred = argmax(row);
      const auto& rec = data.manifest.records[batch[b]];
      r.ids.push_back(rec.id);
      r.labels.push_back(rec.label);
      r.predictions.push_back(pred);
      ++r.confusion[rec.label][pred];
      correct += pred == rec.label;
    }
  }
  r.accuracy = 100.0 * static_cast<double>(correct) / static_cast<double>(records.size());
  return r;
}

SetSummary summarize(const std::vector<EvalResult>& folds, SetKind set, std::size_t classes) {
  SetSummary s;
  s.confusion.assign(classes, std::vector<std::size_t>(classes, 0));
  for (const auto& f : folds) {
    if (f.set != set) continue;
    s.accuracies.push_back(f.accuracy);
    for (std::size_t i = 0; i < classes; ++i)
      for (std::size_t j = 0; j < classes; ++j) s.confusion[i][j] += f.confusion.at(i).at(j);
  }
  if (s.accuracies.empty()) return s;
  const double k = static_cast<double>(s.accuracies.size());
  s.mean = std::accumulate(s.accuracies.begin(), s.accuracies.end(), 0.0) / k;
  if (s.accuracies.size() > 1) {
    double ss = 0;
    for (double a : s.accuracies) ss += (a - s.mean) * (a - s.mean);
    s.std = std::sqrt(ss / (k - 1));
  }
  return s;
}

nlohmann::json CVResult::to_json() const {
  nlohmann::json folds_json = nlohmann::json::array();
  for (const auto& f : folds) folds_json.push_back(f.to_json());
  nlohmann::json summary_json = nlohmann::json::object();
  for (const auto& [set, s] : summary)
    summary_json[to_string(set)] = {
        {"mean", s.mean}, {"std", s.std}, {"accuracies", s.accuracies}, {"confusion", confusion_json(s.confusion)}};
  nlohmann::json losses = nlohmann::json::array();
  for (const auto& l : logs) losses.push_back(l.epoch_loss);
  return {{"config", config},     {"class_names", class_names}, {"folds", folds_json},
          {"summary", summary_json}, {"audit", audit},             {"epoch_loss", losses}};
}

CVResult CVResult::from_json(const nlohmann::json& j) {
  CVResult r;
  try {
    r.config = j.at("config");
    r.class_names = j.value("class_names", std::vector<std::string>{});
    for (const auto& f : j.at("folds")) r.folds.push_back(EvalResult::from_json(f));
    for (const auto& [name, s] : j.at("summary").items()) {
      SetSummary sum;
      sum.mean = s.at("mean").get<double>();
      sum.std = s.at("std").get<double>();
      sum.accuracies = s.at("accuracies").get<std::vector<double>>();
      sum.confusion = s.at("confusion").get<std::vector<std::vector<std::size_t>>>();
      r.summary[parse_set_kind(name)] = std::move(sum);
    }
    r.audit = j.value("audit", nlohmann::json::object());
    for (const auto& l : j.value("epoch_loss", nlohmann::json::array()))
      r.logs.push_back({l.get<std::vector<double>>(), 0.0});
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed results: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("malformed results: ") + e.what());
  }
  return r;
}

nlohmann::json CVResult::timing_json() const {
  std::vector<double> secs;
  for (const auto& l : logs) secs.push_back(l.seconds);
  return {{"train_seconds", secs}};
}

template <typename T>
CVResult run_cv(const TrainConfig& cfg, const Dataset& data, const Progress& progress) {
  cfg.validate();
  const std::size_t k = data.manifest.folds();
  if (k == 0) throw FormatError("dataset has no fold assignment");
  CVResult result;
  result.config = cfg.to_json();
  result.class_names = data.manifest.class_names;
  for (std::size_t fold = 0; fold < k; ++fold) {
    TrainLog log;
    const auto net = train<T>(cfg, data, fold, &log);
    if (progress)
      progress("fold " + std::to_string(fold + 1) + "/" + std::to_string(k) + " trained in " +
               std::to_string(log.seconds) + " s, final loss " +
               std::to_string(log.epoch_loss.empty() ? 0.0 : log.epoch_loss.back()));
    for (auto set : cfg.test_sets) {
      if (!data.has_set(set)) continue;
      result.folds.push_back(evaluate(net, data, set, fold, cfg.batch_size));
      if (progress)
        progress("  " + to_string(set) + ": " + std::to_string(result.folds.back().accuracy) + "%");
    }
    result.logs.push_back(std::move(log));
  }
  for (auto set : cfg.test_sets)
    if (data.has_set(set)) result.summary[set] = summarize(result.folds, set, data.manifest.classes);
  return result;
}

CVResult run_cv(const TrainConfig& cfg, const Dataset& data, const Progress& progress) {
  return cfg.precision == Precision::f32 ? run_cv<float>(cfg, data, progress) : run_cv<double>(cfg, data, progress);
}

nlohmann::json AuditReport::to_json() const {
  return {{"variant", variant},
          {"group", group},
          {"trials", trials},
          {"dim", dim},
          {"max_logit_deviation", max_logit_deviation},
          {"mean_logit_deviation", mean_logit_deviation},
          {"max_logit_deviation_per_element", max_logit_deviation_per_element},
          {"mean_logit_deviation_per_element", mean_logit_deviation_per_element},
          {"max_stage1_deviation", max_stage1_deviation},
          {"max_feature_deviation", max_feature_deviation}};
}

std::vector<float> audit_volume(std::size_t dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01;
  ClassSpec c;
  c.directions = {{n01(rng), n01(rng), n01(rng)}};
  c.spread = 0.3;
  c.band = {1.0, 3.0};
  c.components = 4;
  c.noise = 0.5;
  DatasetConfig cfg;
  cfg.dim = dim;
  cfg.seed = seed;
  cfg.classes = {c};
  auto v = generate_raw_volume(cfg, 0, 0);
  normalize(v);
  return v;
}

template <typename T>
AuditReport audit_equivariance(const Network<T>& net, std::size_t trials, std::size_t dim, std::uint64_t seed) {
  const auto& spec = net.spec();
  const SymmetryGroup audit_group(spec.variant == Variant::z3 ? GroupKind::o : spec.group);
  const SymmetryGroup& own = net.group();
  const bool same_group = own.kind() == audit_group.kind();

  AuditReport rep;
  rep.variant = to_string(spec.variant);
  rep.group = to_string(audit_group.kind());
  rep.trials = trials;
  rep.dim = dim;
  rep.max_logit_deviation_per_element.assign(audit_group.size(), 0.0);
  rep.mean_logit_deviation_per_element.assign(audit_group.size(), 0.0);

  auto max_dev = [](const Tensor<T>& a, const Tensor<T>& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
    return m;
  };

  double sum = 0;
  for (std::size_t t = 0; t < trials; ++t) {
    const auto v = audit_volume(dim, derive_seed(seed, {t}));
    Tensor<T> x({1, 1, dim, dim, dim});
    std::transform(v.begin(), v.end(), x.data(), [](float f) { return static_cast<T>(f); });
    const auto base = net.forward_trace(x);
    for (std::size_t g = 0; g < audit_group.size(); ++g) {
      const auto tr = net.forward_trace(rotate_channels(audit_group.element(g), x));
      const double d = max_dev(tr.logits->value, base.logits->value);
      rep.max_logit_deviation_per_element[g] = std::max(rep.max_logit_deviation_per_element[g], d);
      rep.mean_logit_deviation_per_element[g] += d / static_cast<double>(trials);
      sum += d;

      const Tensor<T> s1 = base.stage1_oriented && same_group
                               ? transform_gfeature(own, g, base.stage1)
                               : rotate_channels(audit_group.element(g), base.stage1);
      rep.max_stage1_deviation = std::max(rep.max_stage1_deviation, max_dev(tr.stage1, s1));
      const Tensor<T> f = base.features_oriented && same_group ? transform_gfeature(own, g, base.pooled_features)
                                                               : base.pooled_features;
      rep.max_feature_deviation = std::max(rep.max_feature_deviation, max_dev(tr.pooled_features, f));
    }
  }
  rep.max_logit_deviation =
      *std::max_element(rep.max_logit_deviation_per_element.begin(), rep.max_logit_deviation_per_element.end());
  rep.mean_logit_deviation = sum / static_cast<double>(std::max<std::size_t>(1, trials * audit_group.size()));
  return rep;
}

#define GCNN_INSTANTIATE(T)                                                                                   \
  template Network<T> train<T>(const TrainConfig&, const Dataset&, std::optional<std::size_t>, TrainLog*,     \
                               const EpochCallback&);                                                         \
  template EvalResult evaluate<T>(const Network<T>&, const Dataset&, SetKind, std::optional<std::size_t>,     \
                                  std::size_t);                                                               \
  template CVResult run_cv<T>(const TrainConfig&, const Dataset&, const Progress&);                           \
  template AuditReport audit_equivariance<T>(const Network<T>&, std::size_t, std::size_t, std::uint64_t);

GCNN_INSTANTIATE(float)
GCNN_INSTANTIATE(double)

}  // namespace gcnn
