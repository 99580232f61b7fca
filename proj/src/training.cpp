#include "dcd/training.hpp"

#include "dcd/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace dcd {

std::string to_string(DecoupledMode m) {
  switch (m) {
    case DecoupledMode::PosOnly: return "pos_only";
    case DecoupledMode::NegOnly: return "neg_only";
    case DecoupledMode::Both: return "both";
  }
  return "?";
}

DecoupledMode decoupled_mode_from_string(const std::string& s) {
  if (s == "pos_only") return DecoupledMode::PosOnly;
  if (s == "neg_only") return DecoupledMode::NegOnly;
  if (s == "both") return DecoupledMode::Both;
  throw std::invalid_argument("unknown decoupled mode: " + s);
}

std::string to_string(InitSource s) {
  switch (s) {
    case InitSource::Sft: return "sft";
    case InitSource::PretrainStage: return "pretrain_stage";
    case InitSource::Random: return "random";
  }
  return "?";
}

InitSource init_source_from_string(const std::string& s) {
  if (s == "sft") return InitSource::Sft;
  if (s == "pretrain_stage") return InitSource::PretrainStage;
  if (s == "random") return InitSource::Random;
  throw std::invalid_argument("unknown init source: " + s);
}

void TrainTrace::save_csv(const std::string& path) const {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("TrainTrace: cannot open " + path);
  os << "step,loss,logp_w,logp_l,margin\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g\n", r.step, r.loss, r.logp_w,
                  r.logp_l, r.margin);
    os << buf;
  }
}

TrainTrace TrainTrace::load_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("TrainTrace: cannot open " + path);
  TrainTrace trace;
  std::string line;
  if (!std::getline(is, line) || line != "step,loss,logp_w,logp_l,margin") {
    throw std::runtime_error("TrainTrace: bad header in " + path);
  }
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    TraceRow r;
    std::istringstream ss(line);
    char comma;
    if (!(ss >> r.step >> comma >> r.loss >> comma >> r.logp_w >> comma >> r.logp_l >> comma >>
          r.margin)) {
      throw std::runtime_error("TrainTrace: bad row in " + path + ": " + line);
    }
    trace.rows.push_back(r);
  }
  return trace;
}

void Sgd::step(const std::vector<Mat*>& params, const std::vector<Var>& leaves) {
  if (params.size() != leaves.size()) {
    throw std::invalid_argument("Sgd::step: parameter/gradient count mismatch");
  }
  if (velocity_.empty() && momentum_ != 0.0) {
    velocity_.reserve(params.size());
    for (const Mat* p : params) velocity_.push_back(Mat::Zero(p->rows(), p->cols()));
  }
  for (size_t i = 0; i < params.size(); ++i) {
    const Mat& g = leaves[i].grad();
    if (momentum_ != 0.0) {
      velocity_[i] = momentum_ * velocity_[i] - lr_ * g;
      *params[i] += velocity_[i];
    } else {
      *params[i] -= lr_ * g;
    }
  }
}

Var sft_loss_var(const ModelVars& m, const ProjectionVars& proj, const TrainingView& s) {
  Var vis = encode_image_var(proj, make_constant(*s.v));
  return neg(mean(response_log_probs(m, vis, *s.x, *s.y_w)));
}

Var dpo_loss_var(const ModelVars& m, const ProjectionVars& proj, const TrainingView& s,
                 Scalar ref_logp_w, Scalar ref_logp_l, Scalar beta) {
  if (beta <= 0) throw std::invalid_argument("dpo_loss: beta must be positive");
  Var vis = encode_image_var(proj, make_constant(*s.v));
  Var logp_w = sum(response_log_probs(m, vis, *s.x, *s.y_w));
  Var logp_l = sum(response_log_probs(m, vis, *s.x, *s.y_l));
  Var margin = sub(add_scalar(logp_w, -ref_logp_w), add_scalar(logp_l, -ref_logp_l));
  return softplus(scale(margin, -beta));
}

Scalar dpo_loss(const ModelParams& params, const VisualProjection& proj,
                const ReferenceModel& ref, const TrainingView& s, Scalar beta) {
  const Scalar ref_w = sequence_log_prob(ref.params, ref.proj, *s.x, *s.v, *s.y_w);
  const Scalar ref_l = sequence_log_prob(ref.params, ref.proj, *s.x, *s.v, *s.y_l);
  return item(dpo_loss_var(lift(params, false), lift(proj, false), s, ref_w, ref_l, beta));
}

Var neg_projection_loss_var(const ModelVars& frozen, const ProjectionVars& neg,
                            const TrainingView& s) {
  Var vis = encode_image_var(neg, make_constant(*s.v));
  return dcd::neg(mean(response_log_probs(frozen, vis, *s.x, *s.y_l)));
}

Var pos_projection_loss_var(const ModelVars& frozen, const ProjectionVars& pos,
                            const TrainingView& s) {
  Var vis = encode_image_var(pos, make_constant(*s.v));
  return dcd::neg(mean(response_log_probs(frozen, vis, *s.x, *s.y_w)));
}

Scalar neg_projection_loss(const ModelParams& frozen, const VisualProjection& neg,
                           const TrainingView& s) {
  return item(neg_projection_loss_var(lift(frozen, false), lift(neg, false), s));
}

Scalar pos_projection_loss(const ModelParams& frozen, const VisualProjection& pos,
                           const TrainingView& s) {
  return item(pos_projection_loss_var(lift(frozen, false), lift(pos, false), s));
}

namespace {

void check_finite_loss(const char* stage, Scalar loss, int step) {
  if (!std::isfinite(loss)) {
    throw NumericError(std::string(stage) + ": loss is not finite at step " +
                       std::to_string(step));
  }
}

// Mean held-out sequence log-likelihoods for trace rows.
std::pair<Scalar, Scalar> probe_log_probs(const ModelParams& params,
                                          const VisualProjection& proj_w,
                                          const VisualProjection& proj_l,
                                          const std::vector<TrainingView>& probe) {
  if (probe.empty()) return {0.0, 0.0};
  Scalar lw = 0, ll = 0;
  for (const auto& s : probe) {
    lw += sequence_log_prob(params, proj_w, *s.x, *s.v, *s.y_w);
    ll += sequence_log_prob(params, proj_l, *s.x, *s.v, *s.y_l);
  }
  const Scalar n = static_cast<Scalar>(probe.size());
  return {lw / n, ll / n};
}

TraceRow make_trace_row(int step, Scalar loss, const ModelParams& params,
                        const VisualProjection& proj_w, const VisualProjection& proj_l,
                        const std::vector<TrainingView>& probe) {
  auto [lw, ll] = probe_log_probs(params, proj_w, proj_l, probe);
  return TraceRow{step, loss, lw, ll, lw - ll};
}

// Deterministic epoch shuffling; batches walk the permutation in order.
class BatchCursor {
 public:
  BatchCursor(size_t n, int batch_size, Rng rng)
      : batch_(static_cast<size_t>(batch_size)), rng_(rng), order_(n) {
    for (size_t i = 0; i < n; ++i) order_[i] = i;
    reshuffle();
  }

  std::vector<size_t> next() {
    std::vector<size_t> idx;
    idx.reserve(batch_);
    for (size_t i = 0; i < batch_; ++i) {
      if (at_ == order_.size()) {
        reshuffle();
        at_ = 0;
      }
      idx.push_back(order_[at_++]);
    }
    return idx;
  }

 private:
  void reshuffle() {
    for (size_t i = order_.size(); i > 1; --i) {
      std::swap(order_[i - 1], order_[static_cast<size_t>(rng_.uniform_int(static_cast<int>(i)))]);
    }
  }
  size_t batch_ = 0;
  size_t at_ = 0;
  Rng rng_;
  std::vector<size_t> order_;
};

}  // namespace

SftResult sft_train(ModelParams params, VisualProjection proj,
                    const std::vector<TrainingView>& data, const SftConfig& config,
                    const std::vector<TrainingView>& probe, Rng rng) {
  if (data.empty()) throw std::invalid_argument("sft_train: empty dataset");
  if (config.steps < 1) throw std::invalid_argument("sft_train: steps must be >= 1");
  Sgd opt_model(config.lr, config.momentum);
  Sgd opt_proj(config.lr, config.momentum);
  BatchCursor cursor(data.size(), config.batch_size, rng.derive("batch"));
  TrainTrace trace;
  Scalar last_loss = 0;
  for (int step = 0; step < config.steps; ++step) {
    ModelVars mv = lift(params, true);
    ProjectionVars pv = lift(proj, true);
    Var total;
    for (size_t idx : cursor.next()) {
      Var li = sft_loss_var(mv, pv, data[idx]);
      total = total.valid() ? add(total, li) : li;
    }
    Var loss = scale(total, 1.0 / static_cast<Scalar>(config.batch_size));
    last_loss = item(loss);
    check_finite_loss("sft_train", last_loss, step);
    if (step % config.log_interval == 0) {
      trace.rows.push_back(make_trace_row(step, last_loss, params, proj, proj, probe));
    }
    backward(loss);
    opt_model.step(param_list(params), mv.leaves);
    opt_proj.step(param_list(proj), pv.leaves);
  }
  // Final state row so the trace brackets the whole run.
  trace.rows.push_back(make_trace_row(config.steps, last_loss, params, proj, proj, probe));
  return SftResult{std::move(params), std::move(proj), std::move(trace)};
}

DpoResult train_dpo(ModelParams params, VisualProjection proj, const ReferenceModel& ref,
                    const std::vector<TrainingView>& data, const DpoConfig& config,
                    const std::vector<TrainingView>& probe, Rng rng) {
  if (data.empty()) throw std::invalid_argument("train_dpo: empty dataset");
  if (config.beta <= 0) throw std::invalid_argument("train_dpo: beta must be positive");
  if (config.steps < 1) throw std::invalid_argument("train_dpo: steps must be >= 1");

  // The reference model never moves, so its log-likelihoods are constants.
  std::vector<Scalar> ref_w(data.size()), ref_l(data.size());
  for (size_t i = 0; i < data.size(); ++i) {
    ref_w[i] = sequence_log_prob(ref.params, ref.proj, *data[i].x, *data[i].v, *data[i].y_w);
    ref_l[i] = sequence_log_prob(ref.params, ref.proj, *data[i].x, *data[i].v, *data[i].y_l);
  }

  Sgd opt_model(config.lr, config.momentum);
  Sgd opt_proj(config.lr, config.momentum);
  BatchCursor cursor(data.size(), config.batch_size, rng.derive("batch"));
  TrainTrace trace;
  Scalar last_loss = 0;
  for (int step = 0; step < config.steps; ++step) {
    ModelVars mv = lift(params, config.full_model);
    ProjectionVars pv = lift(proj, true);
    Var total;
    for (size_t idx : cursor.next()) {
      Var li = dpo_loss_var(mv, pv, data[idx], ref_w[idx], ref_l[idx], config.beta);
      total = total.valid() ? add(total, li) : li;
    }
    Var loss = scale(total, 1.0 / static_cast<Scalar>(config.batch_size));
    last_loss = item(loss);
    check_finite_loss("train_dpo", last_loss, step);
    if (step % config.log_interval == 0) {
      trace.rows.push_back(make_trace_row(step, last_loss, params, proj, proj, probe));
    }
    backward(loss);
    if (config.full_model) opt_model.step(param_list(params), mv.leaves);
    opt_proj.step(param_list(proj), pv.leaves);
  }
  trace.rows.push_back(make_trace_row(config.steps, last_loss, params, proj, proj, probe));
  return DpoResult{std::move(params), std::move(proj), std::move(trace)};
}

ProjectionPair init_projection_from(InitSource source, const ProjectionSources& sources,
                                    const ModelConfig& config, Rng rng) {
  switch (source) {
    case InitSource::Sft:
      if (!sources.sft) throw std::invalid_argument("init_projection_from: missing SFT projector");
      return ProjectionPair{*sources.sft, *sources.sft};
    case InitSource::PretrainStage:
      if (!sources.pretrain) {
        throw std::invalid_argument("init_projection_from: missing pretrain-stage projector");
      }
      return ProjectionPair{*sources.pretrain, *sources.pretrain};
    case InitSource::Random: {
      VisualProjection p = init_projection(config, rng.derive("projection_init"));
      return ProjectionPair{p, p};
    }
  }
  throw std::invalid_argument("init_projection_from: unknown source");
}

DecoupledResult train_decoupled(const ModelParams& frozen, ProjectionPair pair,
                                const std::vector<TrainingView>& data,
                                const DecoupledConfig& config,
                                const std::vector<TrainingView>& probe, Rng rng) {
  if (data.empty()) throw std::invalid_argument("train_decoupled: empty dataset");
  if (config.epochs < 1) throw std::invalid_argument("train_decoupled: epochs must be >= 1");
  const uint64_t model_sum_before = params_checksum(frozen);

  const bool run_neg = config.mode != DecoupledMode::PosOnly;
  const bool run_pos = config.mode != DecoupledMode::NegOnly;
  Sgd opt_neg(config.lr, config.momentum);
  Sgd opt_pos(config.lr, config.momentum);

  const size_t batches_per_epoch =
      (data.size() + static_cast<size_t>(config.batch_size) - 1) /
      static_cast<size_t>(config.batch_size);
  BatchCursor cursor(data.size(), config.batch_size, rng.derive("batch"));
  TrainTrace trace;
  int step = 0;
  const auto log_row = [&](Scalar loss_value) {
    trace.rows.push_back(
        make_trace_row(step, loss_value, frozen, pair.positive, pair.negative, probe));
  };
  Scalar last_loss = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    for (size_t b = 0; b < batches_per_epoch; ++b, ++step) {
      const auto idx = cursor.next();
      Scalar batch_loss = 0;

      if (run_neg) {
        ModelVars mv = lift(frozen, false);
        ProjectionVars nv = lift(pair.negative, true);
        Var total;
        for (size_t i : idx) {
          Var li = neg_projection_loss_var(mv, nv, data[i]);
          total = total.valid() ? add(total, li) : li;
        }
        Var loss = scale(total, 1.0 / static_cast<Scalar>(idx.size()));
        const Scalar v = item(loss);
        check_finite_loss("train_decoupled(neg)", v, step);
        batch_loss += v;
        backward(loss);
        opt_neg.step(param_list(pair.negative), nv.leaves);
      }
      if (run_pos) {
        ModelVars mv = lift(frozen, false);
        ProjectionVars pv = lift(pair.positive, true);
        Var total;
        for (size_t i : idx) {
          Var li = pos_projection_loss_var(mv, pv, data[i]);
          total = total.valid() ? add(total, li) : li;
        }
        Var loss = scale(total, 1.0 / static_cast<Scalar>(idx.size()));
        const Scalar v = item(loss);
        check_finite_loss("train_decoupled(pos)", v, step);
        batch_loss += v;
        backward(loss);
        opt_pos.step(param_list(pair.positive), pv.leaves);
      }

      last_loss = batch_loss;
      if (step % config.log_interval == 0) log_row(batch_loss);
    }
  }
  log_row(last_loss);

  if (params_checksum(frozen) != model_sum_before) {
    throw std::logic_error("train_decoupled: frozen model parameters changed");
  }
  return DecoupledResult{std::move(pair), std::move(trace)};
}

VisualProjection train_caption_projector(const ModelParams& frozen,
                                         const std::vector<TrainingView>& caption_data,
                                         Scalar lr, int epochs, int batch_size, Rng rng) {
  VisualProjection fresh = init_projection(frozen.config, rng.derive("caption_init"));
  DecoupledConfig config;
  config.mode = DecoupledMode::PosOnly;
  config.init = InitSource::Random;
  config.lr = lr;
  config.epochs = epochs;
  config.batch_size = batch_size;
  config.log_interval = 1 << 20;  // no probe logging needed here
  DecoupledResult r = train_decoupled(frozen, ProjectionPair{fresh, fresh}, caption_data, config,
                                      {}, rng.derive("caption_train"));
  return r.pair.positive;
}

}  // namespace dcd
