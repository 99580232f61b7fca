#pragma once

#include "dcd/model.hpp"
#include "dcd/world.hpp"

#include <string>
#include <vector>

namespace dcd {

// Training stages. SFT fits the base model to faithful responses and
// becomes the frozen reference for everything after it. DPO runs pairwise
// preference optimization against that reference. Decoupled training leaves
// the language model untouched and fits the positive / negative projections
// to their own per-side likelihood objectives.
//
// All losses are mean per-token NLL at the sample level; batch losses
// average over samples in a fixed order, so runs are bit-reproducible.

struct SftConfig {
  Scalar lr = 0.2;
  Scalar momentum = 0.9;
  int steps = 1200;
  int batch_size = 16;
  int log_interval = 100;
};

struct DpoConfig {
  Scalar beta = 0.1;
  Scalar lr = 0.01;
  Scalar momentum = 0.0;
  int steps = 400;
  int batch_size = 16;
  bool full_model = true;  // false: only the projection trains
  int log_interval = 20;
};

enum class DecoupledMode { PosOnly, NegOnly, Both };
enum class InitSource { Sft, PretrainStage, Random };

std::string to_string(DecoupledMode m);
DecoupledMode decoupled_mode_from_string(const std::string& s);
std::string to_string(InitSource s);
InitSource init_source_from_string(const std::string& s);

struct DecoupledConfig {
  DecoupledMode mode = DecoupledMode::NegOnly;
  InitSource init = InitSource::Sft;
  Scalar lr = 0.01;
  Scalar momentum = 0.0;
  int epochs = 1;
  int batch_size = 16;
  int log_interval = 20;
};

// One row per logging interval, on a fixed held-out probe set. logp_w/logp_l
// are mean sequence log-likelihoods of the probe positives / negatives;
// margin = logp_w - logp_l.
struct TraceRow {
  int step = 0;
  Scalar loss = 0, logp_w = 0, logp_l = 0, margin = 0;
};
struct TrainTrace {
  std::vector<TraceRow> rows;
  void save_csv(const std::string& path) const;  // columns: step,loss,logp_w,logp_l,margin
  static TrainTrace load_csv(const std::string& path);
};

// Plain SGD with optional momentum over a canonical parameter order.
class Sgd {
 public:
  Sgd(Scalar lr, Scalar momentum) : lr_(lr), momentum_(momentum) {}
  void step(const std::vector<Mat*>& params, const std::vector<Var>& leaves);

 private:
  Scalar lr_ = 0;
  Scalar momentum_ = 0;
  std::vector<Mat> velocity_;
};

struct ReferenceModel {
  ModelParams params;
  VisualProjection proj;
};

// --- loss graphs (also the gradient-check surface) ---

// Mean per-token NLL of y_w given (x, v) through `proj`.
Var sft_loss_var(const ModelVars& m, const ProjectionVars& proj, const TrainingView& s);

// -log sigmoid(beta * ((logp_w - ref_w) - (logp_l - ref_l))). The reference
// log-likelihoods are plain numbers: the reference model is frozen.
Var dpo_loss_var(const ModelVars& m, const ProjectionVars& proj, const TrainingView& s,
                 Scalar ref_logp_w, Scalar ref_logp_l, Scalar beta);
Scalar dpo_loss(const ModelParams& params, const VisualProjection& proj,
                const ReferenceModel& ref, const TrainingView& s, Scalar beta);

// Mean per-token NLL of y_l conditioned on the negative embedding; gradients
// reach only the projection (the model is lifted frozen by the caller).
Var neg_projection_loss_var(const ModelVars& frozen, const ProjectionVars& neg,
                            const TrainingView& s);
Var pos_projection_loss_var(const ModelVars& frozen, const ProjectionVars& pos,
                            const TrainingView& s);
Scalar neg_projection_loss(const ModelParams& frozen, const VisualProjection& neg,
                           const TrainingView& s);
Scalar pos_projection_loss(const ModelParams& frozen, const VisualProjection& pos,
                           const TrainingView& s);

// --- training loops ---

struct SftResult {
  ModelParams params;
  VisualProjection proj;
  TrainTrace trace;
};
SftResult sft_train(ModelParams params, VisualProjection proj,
                    const std::vector<TrainingView>& data, const SftConfig& config,
                    const std::vector<TrainingView>& probe, Rng rng);

struct DpoResult {
  ModelParams params;
  VisualProjection proj;
  TrainTrace trace;
};
DpoResult train_dpo(ModelParams params, VisualProjection proj, const ReferenceModel& ref,
                    const std::vector<TrainingView>& data, const DpoConfig& config,
                    const std::vector<TrainingView>& probe, Rng rng);

struct ProjectionSources {
  const VisualProjection* sft = nullptr;
  const VisualProjection* pretrain = nullptr;
};

// Positive and negative start bitwise identical, from the chosen source.
ProjectionPair init_projection_from(InitSource source, const ProjectionSources& sources,
                                    const ModelConfig& config, Rng rng);

struct DecoupledResult {
  ProjectionPair pair;
  TrainTrace trace;
};
// NegOnly touches only pair.negative, PosOnly only pair.positive, Both runs
// each update on the same data pass. The model is checksummed before and
// after; any change is a contract breach.
DecoupledResult train_decoupled(const ModelParams& frozen, ProjectionPair pair,
                                const std::vector<TrainingView>& data,
                                const DecoupledConfig& config,
                                const std::vector<TrainingView>& probe, Rng rng);

// Pretrain-stage analogue: a fresh random projector fit to caption-style
// data (DESCRIBE positives only) with the language model frozen.
VisualProjection train_caption_projector(const ModelParams& frozen,
                                         const std::vector<TrainingView>& caption_data,
                                         Scalar lr, int epochs, int batch_size, Rng rng);

}  // namespace dcd
