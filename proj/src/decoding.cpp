#include "dcd/decoding.hpp"

#include <cmath>
#include <stdexcept>

namespace dcd {

std::string to_string(DecodeStrategy s) {
  switch (s) {
    case DecodeStrategy::Greedy: return "greedy";
    case DecodeStrategy::Vcd: return "vcd";
    case DecodeStrategy::Dcd: return "dcd";
    case DecodeStrategy::OtherImage: return "other_image";
  }
  return "?";
}

DecodeStrategy strategy_from_string(const std::string& s) {
  if (s == "greedy") return DecodeStrategy::Greedy;
  if (s == "vcd") return DecodeStrategy::Vcd;
  if (s == "dcd") return DecodeStrategy::Dcd;
  if (s == "other_image") return DecodeStrategy::OtherImage;
  throw std::invalid_argument("unknown decode strategy: " + s);
}

void DecodeConfig::validate() const {
  if (alpha < 0) throw std::invalid_argument("DecodeConfig: alpha must be >= 0");
  if (sigma < 0) throw std::invalid_argument("DecodeConfig: sigma must be >= 0");
  if (max_length < 1) throw std::invalid_argument("DecodeConfig: max_length must be >= 1");
  if (sample_with_temperature && temperature <= 0) {
    throw std::invalid_argument("DecodeConfig: temperature must be positive");
  }
}

Mat contrastive_combine(const Mat& logit_w, const Mat& logit_l, Scalar alpha) {
  require_same_shape("contrastive_combine", logit_w, logit_l);
  return (1.0 + alpha) * logit_w - alpha * logit_l;
}

int argmax_token(const Mat& logits) {
  if (logits.rows() != 1 || logits.cols() < 1) {
    throw std::invalid_argument("argmax_token: expected a 1 x V row, got " + shape_str(logits));
  }
  int best = 0;
  for (Index j = 1; j < logits.cols(); ++j) {
    if (logits(0, j) > logits(0, best)) best = static_cast<int>(j);
  }
  return best;
}

namespace {

int pick_token(const Mat& logits, const DecodeConfig& config, Rng* rng) {
  if (!config.sample_with_temperature) return argmax_token(logits);
  if (rng == nullptr) {
    throw std::invalid_argument("decode: temperature sampling needs an rng");
  }
  const Scalar m = logits.maxCoeff();
  Eigen::Array<Scalar, 1, Eigen::Dynamic> p =
      ((logits.array() - m) / config.temperature).exp();
  p /= p.sum();
  Scalar r = rng->uniform();
  Scalar acc = 0;
  for (Index j = 0; j < p.size(); ++j) {
    acc += p(j);
    if (r < acc) return static_cast<int>(j);
  }
  return static_cast<int>(p.size()) - 1;
}

}  // namespace

TokenSequence decode_stream(const LogitStream& stream, const DecodeConfig& config, Rng* rng) {
  config.validate();
  TokenSequence y;
  for (int step = 0; step < config.max_length; ++step) {
    const int tok = pick_token(stream(y), config, rng);
    y.push_back(tok);
    if (tok == config.eos_id) break;
  }
  return y;
}

TokenSequence decode_contrastive_streams(const LogitStream& stream_w, const LogitStream& stream_l,
                                         const DecodeConfig& config, Rng* rng) {
  config.validate();
  TokenSequence y;  // the one shared prefix, handed to both streams
  for (int step = 0; step < config.max_length; ++step) {
    const Mat combined = contrastive_combine(stream_w(y), stream_l(y), config.alpha);
    const int tok = pick_token(combined, config, rng);
    y.push_back(tok);
    if (tok == config.eos_id) break;
  }
  return y;
}

Mat perturb_image(const Mat& v, Scalar sigma, Rng& rng) {
  if (sigma < 0) throw std::invalid_argument("perturb_image: sigma must be >= 0");
  if (sigma == 0) return v;
  Mat out = v;
  for (Index i = 0; i < out.rows(); ++i) {
    for (Index j = 0; j < out.cols(); ++j) out(i, j) += sigma * rng.gaussian();
  }
  return out;
}

TokenSequence greedy_decode(const ModelParams& params, const VisualProjection& proj,
                            const TokenSequence& x, const Mat& v, const DecodeConfig& config) {
  const VisualEmbedding vis = encode_image(v, proj);
  return decode_stream(
      [&](const TokenSequence& prefix) { return forward_logits(params, vis, x, prefix); },
      config);
}

TokenSequence decode_vcd(const ModelParams& params, const VisualProjection& proj,
                         const TokenSequence& x, const Mat& v, const DecodeConfig& config,
                         Rng& rng) {
  // One distorted draw per response, reused across steps.
  const Mat v_noisy = perturb_image(v, config.sigma, rng);
  const VisualEmbedding vis_w = encode_image(v, proj);
  const VisualEmbedding vis_l = encode_image(v_noisy, proj);
  return decode_contrastive_streams(
      [&](const TokenSequence& prefix) { return forward_logits(params, vis_w, x, prefix); },
      [&](const TokenSequence& prefix) { return forward_logits(params, vis_l, x, prefix); },
      config);
}

TokenSequence decode_dcd(const ModelParams& params, const ProjectionPair& pair,
                         const TokenSequence& x, const Mat& v, const DecodeConfig& config) {
  // Both embeddings are computed once per response.
  const VisualEmbedding vis_w = encode_image(v, pair.positive);
  const VisualEmbedding vis_l = encode_image(v, pair.negative);
  return decode_contrastive_streams(
      [&](const TokenSequence& prefix) { return forward_logits(params, vis_w, x, prefix); },
      [&](const TokenSequence& prefix) { return forward_logits(params, vis_l, x, prefix); },
      config);
}

TokenSequence decode_other_image(const ModelParams& params, const VisualProjection& proj,
                                 const TokenSequence& x, const Mat& v, const Mat& v_other,
                                 const DecodeConfig& config) {
  const VisualEmbedding vis_w = encode_image(v, proj);
  const VisualEmbedding vis_l = encode_image(v_other, proj);
  return decode_contrastive_streams(
      [&](const TokenSequence& prefix) { return forward_logits(params, vis_w, x, prefix); },
      [&](const TokenSequence& prefix) { return forward_logits(params, vis_l, x, prefix); },
      config);
}

}  // namespace dcd
