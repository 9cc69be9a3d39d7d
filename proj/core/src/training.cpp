#include "morphgrad/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <nlohmann/json.hpp>
#include <thread>

#include "morphgrad/rng.hpp"

namespace morphgrad {

using nlohmann::json;

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("train: learning_rate must be > 0");
  if (batch_size != 1) throw ConfigError("train: batch_size is fixed at 1");
  if (folds < 2) throw ConfigError("train: folds must be >= 2");
  if (patience < 1) throw ConfigError("train: patience must be >= 1");
  if (max_epochs < 1) throw ConfigError("train: max_epochs must be >= 1");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    throw ConfigError("train: betas must lie in [0,1)");
  if (!(adam_epsilon > 0.0)) throw ConfigError("train: adam_epsilon must be > 0");
}

std::string train_config_to_json(const TrainConfig& cfg) {
  json j;
  j["learning_rate"] = cfg.learning_rate;
  j["beta1"] = cfg.beta1;
  j["beta2"] = cfg.beta2;
  j["adam_epsilon"] = cfg.adam_epsilon;
  j["max_epochs"] = cfg.max_epochs;
  j["patience"] = cfg.patience;
  j["batch_size"] = cfg.batch_size;
  j["folds"] = cfg.folds;
  j["seed"] = cfg.seed;
  j["normalize"] = cfg.normalize;
  return j.dump();
}

TrainConfig train_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train config: invalid JSON: ") + e.what());
  }
  TrainConfig cfg;
  try {
    cfg.learning_rate = j.at("learning_rate").get<double>();
    if (j.contains("beta1")) cfg.beta1 = j.at("beta1").get<double>();
    if (j.contains("beta2")) cfg.beta2 = j.at("beta2").get<double>();
    if (j.contains("adam_epsilon")) cfg.adam_epsilon = j.at("adam_epsilon").get<double>();
    cfg.max_epochs = j.at("max_epochs").get<std::size_t>();
    cfg.patience = j.at("patience").get<std::size_t>();
    if (j.contains("batch_size")) cfg.batch_size = j.at("batch_size").get<std::size_t>();
    cfg.folds = j.at("folds").get<std::size_t>();
    cfg.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("normalize")) cfg.normalize = j.at("normalize").get<bool>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

void AdamOptimizer::step(ParamStore& params, const ParamStore& tracked, Tape& tape) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (const auto& [name, leaf] : tracked.entries()) {
    const Tensor g = tape.grad(leaf);
    auto& st = state_[name];
    if (st.m.empty()) {
      st.m.assign(g.numel(), 0.0);
      st.v.assign(g.numel(), 0.0);
    }
    const Tensor& p = params.at(name);
    std::vector<double> updated(p.data().begin(), p.data().end());
    auto gv = g.data();
    for (std::size_t i = 0; i < updated.size(); ++i) {
      st.m[i] = cfg_.beta1 * st.m[i] + (1.0 - cfg_.beta1) * gv[i];
      st.v[i] = cfg_.beta2 * st.v[i] + (1.0 - cfg_.beta2) * gv[i] * gv[i];
      const double mhat = st.m[i] / bc1;
      const double vhat = st.v[i] / bc2;
      updated[i] -= cfg_.learning_rate * mhat / (std::sqrt(vhat) + cfg_.adam_epsilon);
    }
    params.set(name, Tensor(p.shape(), std::move(updated)));
  }
}

namespace {

Tensor as_batch(const Tensor& image) {
  Shape s = image.shape();
  s.insert(s.begin(), 1);
  return Tensor(s, std::vector<double>(image.data().begin(), image.data().end()));
}

double loss_value(const SegmentationModel& model, const Tensor& batch, const Tensor& target,
                  Tape* tape, Tensor* loss_out) {
  SegmentationModel working;
  working.config = model.config;
  Tensor x = batch;
  if (tape) {
    working.params = model.params.tracked_on(*tape);
  } else {
    working.params = model.params;
  }
  ForwardOutput out = forward(working, x);
  Tensor probs = softmax_channels(out.logits);
  Tensor loss = dice_loss(probs, target);
  if (loss_out) *loss_out = loss;
  return loss[0];
}

}  // namespace

double evaluate_loss(const SegmentationModel& model, const VolumeSample& sample) {
  const Tensor batch = as_batch(sample.image);
  const Tensor target = one_hot(sample.label, model.config.num_classes);
  return loss_value(model, batch, target, nullptr, nullptr);
}

TrainResult train_fold(const SegmentationModel& init,
                       const std::vector<const VolumeSample*>& train_set,
                       const std::vector<const VolumeSample*>& val_set,
                       const TrainConfig& cfg) {
  cfg.validate();
  if (train_set.empty() || val_set.empty())
    throw UsageError("train_fold: train and validation sets must be non-empty");
  for (const VolumeSample* s : train_set)
    for (const VolumeSample* v : val_set)
      if (s == v) throw UsageError("train_fold: train and validation sets overlap");

  SegmentationModel model;
  model.config = init.config;
  model.params = init.params.clone();
  AdamOptimizer opt(cfg);
  Rng shuffle_rng(Rng::derive(cfg.seed, 0xf01d));

  // Pre-encode targets once.
  std::vector<Tensor> train_x, train_t, val_x, val_t;
  for (const VolumeSample* s : train_set) {
    train_x.push_back(as_batch(s->image));
    train_t.push_back(one_hot(s->label, init.config.num_classes));
  }
  for (const VolumeSample* s : val_set) {
    val_x.push_back(as_batch(s->image));
    val_t.push_back(one_hot(s->label, init.config.num_classes));
  }

  TrainResult best;
  best.model.config = init.config;
  double best_val = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;
  std::vector<std::size_t> order(train_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    // Fisher-Yates with the pinned rng keeps the visit order reproducible.
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[shuffle_rng.below(i)]);

    double train_loss_sum = 0.0;
    for (std::size_t idx : order) {
      Tape tape;
      Tensor loss;
      SegmentationModel tracked;
      tracked.config = model.config;
      tracked.params = model.params.tracked_on(tape);
      ForwardOutput out = forward(tracked, train_x[idx]);
      Tensor probs = softmax_channels(out.logits);
      loss = dice_loss(probs, train_t[idx]);
      const double lv = loss[0];
      if (!std::isfinite(lv))
        throw NumericalError("train_fold: non-finite training loss " + std::to_string(lv) +
                             " at epoch " + std::to_string(epoch));
      train_loss_sum += lv;
      tape.backward(loss);
      opt.step(model.params, tracked.params, tape);
    }

    double val_loss_sum = 0.0;
    for (std::size_t i = 0; i < val_x.size(); ++i)
      val_loss_sum += loss_value(model, val_x[i], val_t[i], nullptr, nullptr);
    const double val_loss = val_loss_sum / static_cast<double>(val_x.size());
    if (!std::isfinite(val_loss))
      throw NumericalError("train_fold: non-finite validation loss at epoch " +
                           std::to_string(epoch));

    best.history.push_back(
        {epoch, train_loss_sum / static_cast<double>(train_set.size()), val_loss});

    if (val_loss < best_val) {
      best_val = val_loss;
      best.model.params = model.params.clone();
      since_best = 0;
    } else {
      ++since_best;
      if (since_best >= cfg.patience) break;
    }
  }
  if (!best.model.params.size()) best.model.params = model.params.clone();
  return best;
}

std::vector<std::vector<std::size_t>> kfold_split(std::size_t n, std::size_t k,
                                                  std::uint64_t seed) {
  if (k < 2) throw ConfigError("kfold_split: k must be >= 2");
  if (n < k)
    throw ConfigError("kfold_split: cannot split " + std::to_string(n) + " items into " +
                      std::to_string(k) + " folds");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

  std::vector<std::vector<std::size_t>> folds(k);
  const std::size_t base = n / k;
  const std::size_t extra = n % k;
  std::size_t pos = 0;
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t take = base + (f < extra ? 1 : 0);
    folds[f].assign(order.begin() + pos, order.begin() + pos + take);
    pos += take;
  }
  return folds;
}

Tensor ensemble_predict(const std::vector<const SegmentationModel*>& models,
                        const Tensor& image) {
  if (models.empty()) throw UsageError("ensemble_predict: no models");
  for (const SegmentationModel* m : models) {
    if (network_config_to_json(m->config) != network_config_to_json(models[0]->config))
      throw UsageError("ensemble_predict: models disagree on configuration");
  }
  const Tensor batch = image.rank() == 4 ? as_batch(image) : image;
  Tensor acc;
  for (const SegmentationModel* m : models) {
    Tensor probs = softmax_channels(forward(*m, batch).logits);
    acc = acc.defined() ? add(acc, probs) : probs;
  }
  return mul(acc, 1.0 / static_cast<double>(models.size()));
}

namespace {

struct Counts {
  double tp = 0, fp = 0, fn = 0;
};

double dice_of(const Counts& c) {
  const double den = 2 * c.tp + c.fp + c.fn;
  return den == 0.0 ? 1.0 : 2 * c.tp / den;
}

double sensitivity_of(const Counts& c) {
  const double den = c.tp + c.fn;
  if (den == 0.0) return c.fp == 0.0 ? 1.0 : 0.0;
  return c.tp / den;
}

}  // namespace

Metrics compute_metrics(const Tensor& predicted, const Tensor& truth,
                        std::size_t num_classes) {
  if (predicted.shape() != truth.shape())
    throw UsageError("compute_metrics: shapes " + shape_str(predicted.shape()) + " and " +
                     shape_str(truth.shape()) + " differ");
  auto pv = predicted.data();
  auto tv = truth.data();
  std::vector<Counts> per_class(num_classes);
  Counts whole, core, enhancing;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const double pd = pv[i], td = tv[i];
    if (std::floor(pd) != pd || pd < 0 || pd >= static_cast<double>(num_classes) ||
        std::floor(td) != td || td < 0 || td >= static_cast<double>(num_classes))
      throw UsageError("compute_metrics: labels must be integers in [0," +
                       std::to_string(num_classes) + ")");
    const auto p = static_cast<std::size_t>(pd);
    const auto t = static_cast<std::size_t>(td);
    for (std::size_t k = 0; k < num_classes; ++k) {
      const bool in_p = p == k, in_t = t == k;
      if (in_p && in_t) per_class[k].tp += 1;
      else if (in_p) per_class[k].fp += 1;
      else if (in_t) per_class[k].fn += 1;
    }
    auto tally = [&](Counts& c, std::size_t min_class) {
      const bool in_p = p >= min_class, in_t = t >= min_class;
      if (in_p && in_t) c.tp += 1;
      else if (in_p) c.fp += 1;
      else if (in_t) c.fn += 1;
    };
    tally(whole, 1);
    tally(core, 2);
    tally(enhancing, 3);
  }
  Metrics m;
  for (std::size_t k = 0; k < num_classes; ++k) {
    m.dice.push_back(dice_of(per_class[k]));
    m.sensitivity.push_back(sensitivity_of(per_class[k]));
  }
  m.whole_dice = dice_of(whole);
  m.core_dice = dice_of(core);
  m.enhancing_dice = dice_of(enhancing);
  m.whole_sensitivity = sensitivity_of(whole);
  m.core_sensitivity = sensitivity_of(core);
  m.enhancing_sensitivity = sensitivity_of(enhancing);
  return m;
}

Metrics mean_metrics(const std::vector<Metrics>& all) {
  if (all.empty()) throw UsageError("mean_metrics: empty input");
  Metrics m;
  m.dice.assign(all[0].dice.size(), 0.0);
  m.sensitivity.assign(all[0].sensitivity.size(), 0.0);
  m.whole_dice = m.core_dice = m.enhancing_dice = 0.0;
  m.whole_sensitivity = m.core_sensitivity = m.enhancing_sensitivity = 0.0;
  for (const Metrics& x : all) {
    for (std::size_t k = 0; k < m.dice.size(); ++k) {
      m.dice[k] += x.dice[k];
      m.sensitivity[k] += x.sensitivity[k];
    }
    m.whole_dice += x.whole_dice;
    m.core_dice += x.core_dice;
    m.enhancing_dice += x.enhancing_dice;
    m.whole_sensitivity += x.whole_sensitivity;
    m.core_sensitivity += x.core_sensitivity;
    m.enhancing_sensitivity += x.enhancing_sensitivity;
  }
  const double inv = 1.0 / static_cast<double>(all.size());
  for (std::size_t k = 0; k < m.dice.size(); ++k) {
    m.dice[k] *= inv;
    m.sensitivity[k] *= inv;
  }
  m.whole_dice *= inv;
  m.core_dice *= inv;
  m.enhancing_dice *= inv;
  m.whole_sensitivity *= inv;
  m.core_sensitivity *= inv;
  m.enhancing_sensitivity *= inv;
  return m;
}

std::size_t env_worker_count() {
  const char* env = std::getenv("MORPHGRAD_THREADS");
  if (!env) return 1;
  const long v = std::atol(env);
  return v < 1 ? 1 : static_cast<std::size_t>(v);
}

ExperimentResult run_experiment(const std::vector<VolumeSample>& data,
                                const ExperimentConfig& cfg, std::size_t workers) {
  cfg.network.validate();
  cfg.train.validate();
  const auto folds = kfold_split(data.size(), cfg.train.folds, cfg.train.seed);

  ExperimentResult result;
  result.folds.resize(folds.size());
  std::vector<std::exception_ptr> errors(folds.size());

  auto run_one = [&](std::size_t f) {
    try {
      std::vector<const VolumeSample*> train_set, val_set;
      for (std::size_t i = 0; i < data.size(); ++i) {
        const bool in_val =
            std::find(folds[f].begin(), folds[f].end(), i) != folds[f].end();
        (in_val ? val_set : train_set).push_back(&data[i]);
      }
      SegmentationModel init =
          build_network(cfg.network, Rng::derive(cfg.train.seed, 100 + f));
      TrainConfig fold_cfg = cfg.train;
      fold_cfg.seed = Rng::derive(cfg.train.seed, 200 + f);
      result.folds[f].result = train_fold(init, train_set, val_set, fold_cfg);
      result.folds[f].val_indices = folds[f];
    } catch (...) {
      errors[f] = std::current_exception();
    }
  };

  workers = std::max<std::size_t>(1, std::min(workers, folds.size()));
  if (workers == 1) {
    for (std::size_t f = 0; f < folds.size(); ++f) run_one(f);
  } else {
    std::size_t next = 0;
    while (next < folds.size()) {
      const std::size_t launch = std::min(workers, folds.size() - next);
      std::vector<std::thread> pool;
      for (std::size_t i = 0; i < launch; ++i) pool.emplace_back(run_one, next + i);
      for (auto& th : pool) th.join();
      next += launch;
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  // Every sample is scored once, on its own validation fold, by the
  // ensemble of all fold models.
  std::vector<const SegmentationModel*> members;
  for (const FoldOutcome& f : result.folds) members.push_back(&f.result.model);
  std::vector<Metrics> per_sample;
  for (const FoldOutcome& f : result.folds) {
    for (std::size_t idx : f.val_indices) {
      Tensor probs = ensemble_predict(members, data[idx].image);
      Tensor pred = argmax_channels(probs);
      Tensor pred_vol(Shape(data[idx].label.shape()),
                      std::vector<double>(pred.data().begin(), pred.data().end()));
      per_sample.push_back(
          compute_metrics(pred_vol, data[idx].label, cfg.network.num_classes));
    }
  }
  result.ensemble = mean_metrics(per_sample);
  return result;
}

// ---------------------------------------------------------------------------
// CSV / JSON emission
// ---------------------------------------------------------------------------

namespace {
std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
}  // namespace

std::string history_csv(const std::vector<FoldOutcome>& folds) {
  std::string out(kCsvHeaderComment);
  out += "\nfold,epoch,train_loss,val_loss\n";
  for (std::size_t f = 0; f < folds.size(); ++f)
    for (const EpochRecord& r : folds[f].result.history)
      out += std::to_string(f) + "," + std::to_string(r.epoch) + "," + fmt(r.train_loss) +
             "," + fmt(r.val_loss) + "\n";
  return out;
}

namespace {
std::string metrics_row(Variant variant, const Metrics& m) {
  std::string out(variant_name(variant));
  out += "," + fmt(m.whole_dice) + "," + fmt(m.core_dice) + "," + fmt(m.enhancing_dice) +
         "," + fmt(m.whole_sensitivity) + "," + fmt(m.core_sensitivity) + "," +
         fmt(m.enhancing_sensitivity) + "\n";
  return out;
}
constexpr const char* kMetricsColumns =
    "variant,whole_dice,core_dice,enhancing_dice,"
    "whole_sensitivity,core_sensitivity,enhancing_sensitivity\n";
}  // namespace

std::string metrics_csv(Variant variant, const Metrics& m) {
  std::string out(kCsvHeaderComment);
  out += "\n";
  out += kMetricsColumns;
  out += metrics_row(variant, m);
  return out;
}

std::string compare_table_csv(std::vector<std::pair<Variant, Metrics>> rows) {
  std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
    return static_cast<int>(a.first) < static_cast<int>(b.first);
  });
  std::string out(kCsvHeaderComment);
  out += "\n";
  out += kMetricsColumns;
  for (const auto& [v, m] : rows) out += metrics_row(v, m);
  return out;
}

std::string metrics_to_json(Variant variant, const Metrics& m) {
  json j;
  j["variant"] = std::string(variant_name(variant));
  j["dice"] = m.dice;
  j["sensitivity"] = m.sensitivity;
  j["whole_dice"] = m.whole_dice;
  j["core_dice"] = m.core_dice;
  j["enhancing_dice"] = m.enhancing_dice;
  j["whole_sensitivity"] = m.whole_sensitivity;
  j["core_sensitivity"] = m.core_sensitivity;
  j["enhancing_sensitivity"] = m.enhancing_sensitivity;
  return j.dump(2);
}

std::pair<Variant, Metrics> metrics_from_json(const std::string& text) {
  try {
    json j = json::parse(text);
    Metrics m;
    m.dice = j.at("dice").get<std::vector<double>>();
    m.sensitivity = j.at("sensitivity").get<std::vector<double>>();
    m.whole_dice = j.at("whole_dice").get<double>();
    m.core_dice = j.at("core_dice").get<double>();
    m.enhancing_dice = j.at("enhancing_dice").get<double>();
    m.whole_sensitivity = j.at("whole_sensitivity").get<double>();
    m.core_sensitivity = j.at("core_sensitivity").get<double>();
    m.enhancing_sensitivity = j.at("enhancing_sensitivity").get<double>();
    return {variant_from_name(j.at("variant").get<std::string>()), m};
  } catch (const json::exception& e) {
    throw IoError(std::string("metrics JSON: ") + e.what());
  }
}

}  // namespace morphgrad
