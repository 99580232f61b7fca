#include "dcd/model.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace dcd {

namespace {
constexpr Scalar kInitStd = 0.02;
}

void ModelConfig::validate() const {
  if (vocab_size < 4) throw std::invalid_argument("ModelConfig: vocab_size must be >= 4");
  if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || n_visual_tokens <= 0 || d_image <= 0 ||
      max_context <= 0) {
    throw std::invalid_argument("ModelConfig: dimensions must be positive");
  }
  if (d_model % n_heads != 0) {
    throw std::invalid_argument("ModelConfig: n_heads (" + std::to_string(n_heads) +
                                ") must divide d_model (" + std::to_string(d_model) + ")");
  }
  if (projection == ProjectionKind::TwoLayerMlp && d_proj_hidden <= 0) {
    throw std::invalid_argument("ModelConfig: d_proj_hidden must be positive");
  }
  if (n_visual_tokens >= max_context) {
    throw std::invalid_argument("ModelConfig: visual tokens leave no room in the context");
  }
}

ModelParams init_model(const ModelConfig& config, Rng rng) {
  config.validate();
  ModelParams p;
  p.config = config;
  const int d = config.d_model;
  p.tok_emb = gaussian_matrix(config.vocab_size, d, kInitStd, rng);
  p.pos_emb = gaussian_matrix(config.max_context, d, kInitStd, rng);
  p.blocks.resize(config.n_layers);
  for (auto& b : p.blocks) {
    b.ln1_gain = Mat::Ones(1, d);
    b.ln1_bias = Mat::Zero(1, d);
    b.wq = gaussian_matrix(d, d, kInitStd, rng);
    b.wk = gaussian_matrix(d, d, kInitStd, rng);
    b.wv = gaussian_matrix(d, d, kInitStd, rng);
    b.wo = gaussian_matrix(d, d, kInitStd, rng);
    b.ln2_gain = Mat::Ones(1, d);
    b.ln2_bias = Mat::Zero(1, d);
    b.w_up = gaussian_matrix(d, config.d_mlp(), kInitStd, rng);
    b.b_up = Mat::Zero(1, config.d_mlp());
    b.w_down = gaussian_matrix(config.d_mlp(), d, kInitStd, rng);
    b.b_down = Mat::Zero(1, d);
  }
  p.lnf_gain = Mat::Ones(1, d);
  p.lnf_bias = Mat::Zero(1, d);
  p.lm_w = gaussian_matrix(d, config.vocab_size, kInitStd, rng);
  p.lm_b = Mat::Zero(1, config.vocab_size);
  return p;
}

VisualProjection init_projection(const ModelConfig& config, Rng rng) {
  config.validate();
  VisualProjection p;
  p.kind = config.projection;
  p.d_image = config.d_image;
  p.n_tokens = config.n_visual_tokens;
  p.d_model = config.d_model;
  const int out = config.n_visual_tokens * config.d_model;
  if (p.kind == ProjectionKind::TwoLayerMlp) {
    p.d_hidden = config.d_proj_hidden;
    p.w1 = gaussian_matrix(config.d_image, p.d_hidden, kInitStd, rng);
    p.b1 = Mat::Zero(1, p.d_hidden);
    p.w2 = gaussian_matrix(p.d_hidden, out, kInitStd, rng);
    p.b2 = Mat::Zero(1, out);
  } else {
    p.d_hidden = 0;
    p.w1 = gaussian_matrix(config.d_image, out, kInitStd, rng);
    p.b1 = Mat::Zero(1, out);
  }
  return p;
}

ModelParams snapshot(const ModelParams& params) { return params; }

std::vector<Mat*> param_list(ModelParams& p) {
  std::vector<Mat*> out{&p.tok_emb, &p.pos_emb};
  for (auto& b : p.blocks) {
    for (Mat* m : {&b.ln1_gain, &b.ln1_bias, &b.wq, &b.wk, &b.wv, &b.wo, &b.ln2_gain,
                   &b.ln2_bias, &b.w_up, &b.b_up, &b.w_down, &b.b_down}) {
      out.push_back(m);
    }
  }
  out.push_back(&p.lnf_gain);
  out.push_back(&p.lnf_bias);
  out.push_back(&p.lm_w);
  out.push_back(&p.lm_b);
  return out;
}

std::vector<const Mat*> param_list(const ModelParams& p) {
  auto mut = param_list(const_cast<ModelParams&>(p));
  return {mut.begin(), mut.end()};
}

std::vector<Mat*> param_list(VisualProjection& p) {
  if (p.kind == ProjectionKind::TwoLayerMlp) return {&p.w1, &p.b1, &p.w2, &p.b2};
  return {&p.w1, &p.b1};
}

std::vector<const Mat*> param_list(const VisualProjection& p) {
  auto mut = param_list(const_cast<VisualProjection&>(p));
  return {mut.begin(), mut.end()};
}

namespace {

uint64_t checksum_list(const std::vector<const Mat*>& mats) {
  uint64_t h = 1469598103934665603ULL;
  for (const Mat* m : mats) h = checksum(*m, h);
  return h;
}

bool bitwise_equal(const Mat& a, const Mat& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  return std::memcmp(a.data(), b.data(), sizeof(Scalar) * static_cast<size_t>(a.size())) == 0;
}

}  // namespace

uint64_t params_checksum(const ModelParams& p) { return checksum_list(param_list(p)); }
uint64_t projection_checksum(const VisualProjection& p) { return checksum_list(param_list(p)); }

bool params_equal(const ModelParams& a, const ModelParams& b) {
  if (!(a.config == b.config)) return false;
  auto la = param_list(a), lb = param_list(b);
  if (la.size() != lb.size()) return false;
  for (size_t i = 0; i < la.size(); ++i) {
    if (!bitwise_equal(*la[i], *lb[i])) return false;
  }
  return true;
}

bool projection_equal(const VisualProjection& a, const VisualProjection& b) {
  if (a.kind != b.kind || a.d_image != b.d_image || a.n_tokens != b.n_tokens ||
      a.d_model != b.d_model || a.d_hidden != b.d_hidden) {
    return false;
  }
  auto la = param_list(a), lb = param_list(b);
  for (size_t i = 0; i < la.size(); ++i) {
    if (!bitwise_equal(*la[i], *lb[i])) return false;
  }
  return true;
}

ModelVars lift(const ModelParams& p, bool trainable) {
  auto wrap = [&](const Mat& m) {
    return trainable ? make_leaf(m) : make_constant(m);
  };
  ModelVars v;
  v.config = &p.config;
  v.tok_emb = wrap(p.tok_emb);
  v.pos_emb = wrap(p.pos_emb);
  v.blocks.reserve(p.blocks.size());
  for (const auto& b : p.blocks) {
    BlockVars bv;
    bv.ln1_gain = wrap(b.ln1_gain);
    bv.ln1_bias = wrap(b.ln1_bias);
    bv.wq = wrap(b.wq);
    bv.wk = wrap(b.wk);
    bv.wv = wrap(b.wv);
    bv.wo = wrap(b.wo);
    bv.ln2_gain = wrap(b.ln2_gain);
    bv.ln2_bias = wrap(b.ln2_bias);
    bv.w_up = wrap(b.w_up);
    bv.b_up = wrap(b.b_up);
    bv.w_down = wrap(b.w_down);
    bv.b_down = wrap(b.b_down);
    v.blocks.push_back(bv);
  }
  v.lnf_gain = wrap(p.lnf_gain);
  v.lnf_bias = wrap(p.lnf_bias);
  v.lm_w = wrap(p.lm_w);
  v.lm_b = wrap(p.lm_b);
  v.leaves = {v.tok_emb, v.pos_emb};
  for (const auto& bv : v.blocks) {
    for (const Var* x : {&bv.ln1_gain, &bv.ln1_bias, &bv.wq, &bv.wk, &bv.wv, &bv.wo,
                         &bv.ln2_gain, &bv.ln2_bias, &bv.w_up, &bv.b_up, &bv.w_down,
                         &bv.b_down}) {
      v.leaves.push_back(*x);
    }
  }
  v.leaves.push_back(v.lnf_gain);
  v.leaves.push_back(v.lnf_bias);
  v.leaves.push_back(v.lm_w);
  v.leaves.push_back(v.lm_b);
  return v;
}

ProjectionVars lift(const VisualProjection& p, bool trainable) {
  auto wrap = [&](const Mat& m) {
    return trainable ? make_leaf(m) : make_constant(m);
  };
  ProjectionVars v;
  v.kind = p.kind;
  v.n_tokens = p.n_tokens;
  v.d_model = p.d_model;
  v.w1 = wrap(p.w1);
  v.b1 = wrap(p.b1);
  if (p.kind == ProjectionKind::TwoLayerMlp) {
    v.w2 = wrap(p.w2);
    v.b2 = wrap(p.b2);
    v.leaves = {v.w1, v.b1, v.w2, v.b2};
  } else {
    v.leaves = {v.w1, v.b1};
  }
  return v;
}

Var encode_image_var(const ProjectionVars& proj, const Var& v) {
  Var flat;
  if (proj.kind == ProjectionKind::TwoLayerMlp) {
    Var hidden = gelu(add_row_broadcast(matmul(v, proj.w1), proj.b1));
    flat = add_row_broadcast(matmul(hidden, proj.w2), proj.b2);
  } else {
    flat = add_row_broadcast(matmul(v, proj.w1), proj.b1);
  }
  return reshape(flat, proj.n_tokens, proj.d_model);
}

VisualEmbedding encode_image(const ImageFeature& v, const VisualProjection& proj) {
  if (v.rows() != 1 || v.cols() != proj.d_image) {
    throw std::invalid_argument("encode_image: feature " + shape_str(v) + " does not match d_image=" +
                                std::to_string(proj.d_image));
  }
  return encode_image_var(lift(proj, false), make_constant(v)).value();
}

namespace {

void require_tokens(const ModelConfig& config, const TokenSequence& tokens, const char* what) {
  for (int id : tokens) {
    if (id < 0 || id >= config.vocab_size) {
      throw std::invalid_argument(std::string(what) + ": token id " + std::to_string(id) +
                                  " outside vocab of size " + std::to_string(config.vocab_size));
    }
  }
}

}  // namespace

Var forward_hidden(const ModelVars& m, const Var& vis, const TokenSequence& tokens) {
  const ModelConfig& cfg = *m.config;
  if (vis.rows() != cfg.n_visual_tokens || vis.cols() != cfg.d_model) {
    throw std::invalid_argument("forward_hidden: visual embedding " + shape_str(vis.value()) +
                                " does not match model (" + std::to_string(cfg.n_visual_tokens) +
                                ", " + std::to_string(cfg.d_model) + ")");
  }
  require_tokens(cfg, tokens, "forward_hidden");
  const Index t_total = cfg.n_visual_tokens + static_cast<Index>(tokens.size());
  if (t_total > cfg.max_context) {
    throw std::invalid_argument(
        "forward_hidden: context overflow, " + std::to_string(cfg.n_visual_tokens) +
        " visual + " + std::to_string(tokens.size()) + " token positions exceed max_context=" +
        std::to_string(cfg.max_context));
  }
  Var h;
  if (tokens.empty()) {
    h = vis;
  } else {
    h = concat_rows({vis, embedding_lookup(m.tok_emb, tokens)});
  }
  h = add(h, row_slice(m.pos_emb, 0, t_total));
  const int dh = cfg.head_dim();
  for (const auto& b : m.blocks) {
    Var a = layer_norm(h, b.ln1_gain, b.ln1_bias);
    Var q = matmul(a, b.wq);
    Var k = matmul(a, b.wk);
    Var v = matmul(a, b.wv);
    std::vector<Var> heads;
    heads.reserve(cfg.n_heads);
    for (int i = 0; i < cfg.n_heads; ++i) {
      heads.push_back(causal_attention(col_slice(q, i * dh, dh), col_slice(k, i * dh, dh),
                                       col_slice(v, i * dh, dh)));
    }
    h = add(h, matmul(concat_cols(heads), b.wo));
    Var n = layer_norm(h, b.ln2_gain, b.ln2_bias);
    Var up = gelu(add_row_broadcast(matmul(n, b.w_up), b.b_up));
    h = add(h, add_row_broadcast(matmul(up, b.w_down), b.b_down));
  }
  return layer_norm(h, m.lnf_gain, m.lnf_bias);
}

Var logits_rows(const ModelVars& m, const Var& vis, const TokenSequence& tokens, Index start,
                Index n) {
  Var h = forward_hidden(m, vis, tokens);
  return add_row_broadcast(matmul(row_slice(h, start, n), m.lm_w), m.lm_b);
}

Mat forward_logits(const ModelParams& params, const VisualEmbedding& vis,
                   const TokenSequence& x, const TokenSequence& y_prefix) {
  TokenSequence tokens = x;
  tokens.insert(tokens.end(), y_prefix.begin(), y_prefix.end());
  ModelVars m = lift(params, false);
  const Index t_total = params.config.n_visual_tokens + static_cast<Index>(tokens.size());
  return logits_rows(m, make_constant(vis), tokens, t_total - 1, 1).value();
}

Var response_log_probs(const ModelVars& m, const Var& vis, const TokenSequence& x,
                       const TokenSequence& y) {
  if (y.empty()) throw std::invalid_argument("response_log_probs: empty response");
  TokenSequence tokens = x;
  tokens.insert(tokens.end(), y.begin(), y.end());
  const Index start = m.config->n_visual_tokens + static_cast<Index>(x.size()) - 1;
  Var logits = logits_rows(m, vis, tokens, start, static_cast<Index>(y.size()));
  return gather_per_row(log_softmax(logits), y);
}

Var sequence_log_prob_var(const ModelVars& m, const ProjectionVars& proj,
                          const TokenSequence& x, const ImageFeature& v,
                          const TokenSequence& y) {
  Var vis = encode_image_var(proj, make_constant(v));
  return sum(response_log_probs(m, vis, x, y));
}

Scalar sequence_log_prob(const ModelParams& params, const VisualProjection& proj,
                         const TokenSequence& x, const ImageFeature& v,
                         const TokenSequence& y) {
  require_tokens(params.config, y, "sequence_log_prob");
  if (y.empty()) return 0.0;
  return item(sequence_log_prob_var(lift(params, false), lift(proj, false), x, v, y));
}

// --- checkpoint io ---

namespace {

constexpr char kMagic[8] = {'D', 'C', 'D', 'C', 'K', 'P', 'T', '1'};

void write_u64(std::ostream& os, uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
void write_i32(std::ostream& os, int32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }

uint64_t read_u64(std::istream& is) {
  uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 8);
  return v;
}
int32_t read_i32(std::istream& is) {
  int32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  return v;
}

void write_mat(std::ostream& os, const Mat& m) {
  write_i32(os, static_cast<int32_t>(m.rows()));
  write_i32(os, static_cast<int32_t>(m.cols()));
  os.write(reinterpret_cast<const char*>(m.data()),
           static_cast<std::streamsize>(sizeof(Scalar) * m.size()));
}

Mat read_mat(std::istream& is) {
  const int32_t rows = read_i32(is), cols = read_i32(is);
  if (rows < 0 || cols < 0) throw std::runtime_error("checkpoint: corrupt tensor header");
  Mat m(rows, cols);
  is.read(reinterpret_cast<char*>(m.data()),
          static_cast<std::streamsize>(sizeof(Scalar) * m.size()));
  return m;
}

void write_config(std::ostream& os, const ModelConfig& c) {
  write_i32(os, c.vocab_size);
  write_i32(os, c.d_model);
  write_i32(os, c.n_layers);
  write_i32(os, c.n_heads);
  write_i32(os, c.n_visual_tokens);
  write_i32(os, c.d_image);
  write_i32(os, c.max_context);
  write_i32(os, c.d_proj_hidden);
  write_i32(os, c.projection == ProjectionKind::TwoLayerMlp ? 0 : 1);
}

ModelConfig read_config(std::istream& is) {
  ModelConfig c;
  c.vocab_size = read_i32(is);
  c.d_model = read_i32(is);
  c.n_layers = read_i32(is);
  c.n_heads = read_i32(is);
  c.n_visual_tokens = read_i32(is);
  c.d_image = read_i32(is);
  c.max_context = read_i32(is);
  c.d_proj_hidden = read_i32(is);
  c.projection = read_i32(is) == 0 ? ProjectionKind::TwoLayerMlp : ProjectionKind::Linear;
  return c;
}

void write_projection(std::ostream& os, const VisualProjection& p) {
  write_i32(os, p.kind == ProjectionKind::TwoLayerMlp ? 0 : 1);
  write_i32(os, p.d_image);
  write_i32(os, p.n_tokens);
  write_i32(os, p.d_model);
  write_i32(os, p.d_hidden);
  for (const Mat* m : param_list(p)) write_mat(os, *m);
}

VisualProjection read_projection(std::istream& is) {
  VisualProjection p;
  p.kind = read_i32(is) == 0 ? ProjectionKind::TwoLayerMlp : ProjectionKind::Linear;
  p.d_image = read_i32(is);
  p.n_tokens = read_i32(is);
  p.d_model = read_i32(is);
  p.d_hidden = read_i32(is);
  p.w1 = read_mat(is);
  p.b1 = read_mat(is);
  if (p.kind == ProjectionKind::TwoLayerMlp) {
    p.w2 = read_mat(is);
    p.b2 = read_mat(is);
  }
  return p;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_checkpoint: cannot open " + path);
  os.write(kMagic, sizeof kMagic);
  write_config(os, ckpt.config);
  write_u64(os, ckpt.seed);
  const auto mats = param_list(ckpt.params);
  write_i32(os, static_cast<int32_t>(mats.size()));
  for (const Mat* m : mats) write_mat(os, *m);
  write_projection(os, ckpt.positive);
  write_projection(os, ckpt.negative);
  if (!os) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[8];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw std::runtime_error("load_checkpoint: " + path + " is not a checkpoint file");
  }
  Checkpoint ckpt;
  ckpt.config = read_config(is);
  ckpt.seed = read_u64(is);
  // Rebuild the parameter skeleton from config, then overwrite every tensor.
  ckpt.params = init_model(ckpt.config, Rng(0));
  auto mats = param_list(ckpt.params);
  const int32_t count = read_i32(is);
  if (count != static_cast<int32_t>(mats.size())) {
    throw std::runtime_error("load_checkpoint: tensor count mismatch in " + path);
  }
  for (Mat* m : mats) *m = read_mat(is);
  ckpt.positive = read_projection(is);
  ckpt.negative = read_projection(is);
  if (!is) throw std::runtime_error("load_checkpoint: truncated file " + path);
  return ckpt;
}

}  // namespace dcd
