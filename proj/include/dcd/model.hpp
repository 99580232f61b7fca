#pragma once

#include "dcd/autodiff.hpp"
#include "dcd/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace dcd {

// A tiny decoder-only multimodal LM. An image feature is projected to
// n_visual_tokens prefix embeddings, then a causal transformer runs over
// [visual tokens; prompt tokens; response tokens] with learned absolute
// position embeddings. Next-token logits come from a final layer norm and a
// linear head with bias.
//
// Conventions: the prompt begins with BOS and responses end with EOS; both
// live in the token stream, the model inserts nothing itself.

using ImageFeature = Mat;     // 1 x d_image
using VisualEmbedding = Mat;  // n_visual_tokens x d_model

enum class ProjectionKind { TwoLayerMlp, Linear };

struct ModelConfig {
  int vocab_size = 32;
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int n_visual_tokens = 4;
  int d_image = 16;
  int max_context = 64;
  int d_proj_hidden = 32;
  ProjectionKind projection = ProjectionKind::TwoLayerMlp;

  int d_mlp() const { return 4 * d_model; }
  int head_dim() const { return d_model / n_heads; }
  void validate() const;  // throws std::invalid_argument on inconsistency
  bool operator==(const ModelConfig&) const = default;
};

struct BlockParams {
  Mat ln1_gain, ln1_bias;
  Mat wq, wk, wv, wo;  // d x d, no biases
  Mat ln2_gain, ln2_bias;
  Mat w_up, b_up, w_down, b_down;
};

struct ModelParams {
  ModelConfig config;
  Mat tok_emb;  // vocab x d
  Mat pos_emb;  // max_context x d
  std::vector<BlockParams> blocks;
  Mat lnf_gain, lnf_bias;
  Mat lm_w;  // d x vocab
  Mat lm_b;  // 1 x vocab
};

// Two-layer MLP (default) or plain linear map from an image feature to the
// visual token embeddings.
struct VisualProjection {
  ProjectionKind kind = ProjectionKind::TwoLayerMlp;
  int d_image = 0, n_tokens = 0, d_model = 0, d_hidden = 0;
  Mat w1, b1;  // mlp: d_image x d_hidden; linear: d_image x (n_tokens*d_model)
  Mat w2, b2;  // mlp only: d_hidden x (n_tokens*d_model)
};

// Positive/negative projection pair; identical right after initialization,
// free to diverge under training.
struct ProjectionPair {
  VisualProjection positive;
  VisualProjection negative;
};

ModelParams init_model(const ModelConfig& config, Rng rng);
VisualProjection init_projection(const ModelConfig& config, Rng rng);

// Deep, independent copy; training the original never touches it.
ModelParams snapshot(const ModelParams& params);

// Canonical parameter enumeration (stable order, used by optimizers,
// checkpoints and checksums).
std::vector<Mat*> param_list(ModelParams& p);
std::vector<const Mat*> param_list(const ModelParams& p);
std::vector<Mat*> param_list(VisualProjection& p);
std::vector<const Mat*> param_list(const VisualProjection& p);

uint64_t params_checksum(const ModelParams& p);
uint64_t projection_checksum(const VisualProjection& p);
bool params_equal(const ModelParams& a, const ModelParams& b);      // bitwise
bool projection_equal(const VisualProjection& a, const VisualProjection& b);

// Graph-lifted parameter mirrors. `trainable` decides whether gradients are
// tracked; frozen lifts cost nothing in backward.
struct BlockVars {
  Var ln1_gain, ln1_bias, wq, wk, wv, wo, ln2_gain, ln2_bias, w_up, b_up, w_down, b_down;
};
struct ModelVars {
  const ModelConfig* config = nullptr;
  Var tok_emb, pos_emb;
  std::vector<BlockVars> blocks;
  Var lnf_gain, lnf_bias, lm_w, lm_b;
  std::vector<Var> leaves;  // same order as param_list
};
struct ProjectionVars {
  ProjectionKind kind = ProjectionKind::TwoLayerMlp;
  int n_tokens = 0, d_model = 0;
  Var w1, b1, w2, b2;
  std::vector<Var> leaves;
};
ModelVars lift(const ModelParams& p, bool trainable);
ProjectionVars lift(const VisualProjection& p, bool trainable);

// --- forward passes ---

Var encode_image_var(const ProjectionVars& proj, const Var& v);
VisualEmbedding encode_image(const ImageFeature& v, const VisualProjection& proj);

// Hidden states for the full context [vis; tokens], final layer norm applied.
Var forward_hidden(const ModelVars& m, const Var& vis, const TokenSequence& tokens);

// Logits rows [start, start+n) of the full context (positions predict the
// *next* input element).
Var logits_rows(const ModelVars& m, const Var& vis, const TokenSequence& tokens, Index start,
                Index n);

// Next-token logits (1 x vocab) after [vis; x; y_prefix].
Mat forward_logits(const ModelParams& params, const VisualEmbedding& vis,
                   const TokenSequence& x, const TokenSequence& y_prefix);

// Per-token log-probabilities of y given (x, vis): 1 x |y|.
Var response_log_probs(const ModelVars& m, const Var& vis, const TokenSequence& x,
                       const TokenSequence& y);

// Sum over response tokens of log p(y_t | v, x, y_<t); empty y gives 0.
Var sequence_log_prob_var(const ModelVars& m, const ProjectionVars& proj,
                          const TokenSequence& x, const ImageFeature& v,
                          const TokenSequence& y);
Scalar sequence_log_prob(const ModelParams& params, const VisualProjection& proj,
                         const TokenSequence& x, const ImageFeature& v,
                         const TokenSequence& y);

// --- checkpoints ---

// Binary container for config, model weights, both projections and the run
// seed. Round-trips bit-exactly.
struct Checkpoint {
  ModelConfig config;
  ModelParams params;
  VisualProjection positive;
  VisualProjection negative;
  uint64_t seed = 0;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace dcd
