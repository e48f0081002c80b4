#include "icdit/backbone.hpp"

#include <cmath>
#include <numeric>

#include "icdit/errors.hpp"
#include "icdit/ops.hpp"
#include "icdit/rng.hpp"

namespace icdit {

namespace {

constexpr std::array<const char*, 3> kPairNames = {"text", "layout", "embedding"};
constexpr std::array<const char*, 4> kStreamNames = {"image", "text", "layout", "embedding"};

Tensor weight(std::size_t rows, std::size_t cols, Rng& rng, double stddev) {
  return Tensor::randn({rows, cols}, rng, stddev, true);
}

Tensor zeros_param(Shape shape) { return Tensor::zeros(std::move(shape), true); }

std::vector<std::size_t> uniform_offsets(std::size_t batch, std::size_t per_sample) {
  std::vector<std::size_t> off(batch + 1);
  for (std::size_t s = 0; s <= batch; ++s) off[s] = s * per_sample;
  return off;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return add_bias(matmul(x, w), b); }

Tensor mlp_forward(const Tensor& x, const MlpParams& p) { return linear(gelu(linear(x, p.w1, p.b1)), p.w2, p.b2); }

}  // namespace

void ModelConfig::validate() const {
  if (depth == 0 || d_model == 0 || n_heads == 0 || patch_size == 0 || latent_channels == 0 || latent_h == 0 ||
      latent_w == 0 || steps == 0)
    throw ConfigError("model: all sizes must be positive");
  if (d_model % n_heads != 0) throw ConfigError("model: d_model must be divisible by n_heads");
  if (d_model % 2 != 0) throw ConfigError("model: d_model must be even");
  if (latent_h % patch_size != 0 || latent_w % patch_size != 0)
    throw ConfigError("model: latent size must be divisible by patch_size");
}

bool DropSet::contains(ConditionKind kind) const {
  switch (kind) {
    case ConditionKind::caption:
      return caption;
    case ConditionKind::layout:
      return layout;
    case ConditionKind::embedding:
      return embedding;
  }
  return false;
}

std::string DropSet::label() const {
  std::string out;
  auto add_name = [&](bool on, const char* name) {
    if (!on) return;
    if (!out.empty()) out += '+';
    out += name;
  };
  add_name(caption, "caption");
  add_name(layout, "layout");
  add_name(embedding, "embedding");
  return out.empty() ? "none" : out;
}

std::vector<DropSet> DropSet::all() {
  std::vector<DropSet> out;
  for (int mask = 0; mask < 8; ++mask) out.push_back({(mask & 1) != 0, (mask & 2) != 0, (mask & 4) != 0});
  return out;
}

DropSet DropSet::from_names(std::span<const std::string> names) {
  DropSet d;
  for (const auto& n : names) {
    bool* slot = n == "caption" ? &d.caption : n == "layout" ? &d.layout : n == "embedding" ? &d.embedding : nullptr;
    if (!slot) throw ConfigError("ablation.drop: unknown condition '" + n + "'");
    if (*slot) throw ConfigError("ablation.drop: duplicate condition '" + n + "'");
    *slot = true;
  }
  return d;
}

StreamBatch stack_streams(std::span<const TokenStream> streams, const Tensor* positions) {
  if (streams.empty()) throw ShapeError("stack_streams: empty batch");
  const std::size_t d = streams[0].width();
  std::vector<double> data;
  StreamBatch out;
  out.offsets.push_back(0);
  for (const auto& s : streams) {
    if (s.width() != d) throw ShapeError("stack_streams: token widths differ");
    if (positions && positions->shape() != s.tokens.shape())
      throw ShapeError("stack_streams: position signal " + shape_str(positions->shape()) + " does not match " +
                       shape_str(s.tokens.shape()));
    const auto src = s.tokens.data();
    for (std::size_t i = 0; i < src.size(); ++i) data.push_back(src[i] + (positions ? (*positions)[i] : 0.0));
    out.offsets.push_back(out.offsets.back() + s.size());
  }
  out.tokens = Tensor({out.offsets.back(), d}, std::move(data));
  return out;
}

ConditionBatch make_condition_batch(std::span<const SampleConditions> samples, const ModelConfig& config) {
  std::vector<TokenStream> text, layout, emb;
  for (const auto& s : samples) {
    text.push_back(s.text);
    layout.push_back(s.layout);
    emb.push_back(s.embedding);
  }
  const Tensor pos = grid_positions(config.grid_h(), config.grid_w(), config.d_model);
  return {stack_streams(text), stack_streams(layout, &pos), stack_streams(emb)};
}

ModelParams init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  const std::size_t d = config.d_model, hidden = 4 * d;
  Rng root(seed, 0x6d6f64656c);
  std::uint64_t stream = 0;
  auto next = [&] { return root.split(stream++); };
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  const double sh = 1.0 / std::sqrt(static_cast<double>(hidden));

  ModelParams p;
  p.config = config;
  {
    Rng r = next();
    p.t_w1 = weight(d, d, r, sd);
    p.t_b1 = zeros_param({d});
    p.t_w2 = weight(d, d, r, sd);
    p.t_b2 = zeros_param({d});
  }
  for (std::size_t b = 0; b < config.depth; ++b) {
    BlockParams bp;
    Rng r = next();
    for (auto& a : bp.attn) {
      for (Tensor* w : {&a.q_a, &a.k_a, &a.v_a, &a.o_a, &a.q_b, &a.k_b, &a.v_b, &a.o_b}) *w = weight(d, d, r, sd);
      a.n_heads = config.n_heads;
    }
    for (auto* norms : {&bp.cond_attn_norm, &bp.cond_mlp_norm})
      for (auto& n : *norms) {
        n.gain = Tensor::full({d}, 1.0, true);
        n.bias = zeros_param({d});
      }
    for (auto& m : bp.mlp) {
      m.w1 = weight(d, hidden, r, sd);
      m.b1 = zeros_param({hidden});
      m.w2 = weight(hidden, d, r, sh);
      m.b2 = zeros_param({d});
    }
    bp.ada_w = zeros_param({d, 12 * d});
    bp.ada_b = zeros_param({12 * d});
    p.blocks.push_back(std::move(bp));
  }
  Rng r = next();
  p.final_ada_w = zeros_param({d, 2 * d});
  p.final_ada_b = zeros_param({2 * d});
  p.head_w = weight(d, config.patch_width(), r, 0.02);
  p.head_b = zeros_param({config.patch_width()});
  p.null_caption = weight(1, d, r, 0.5);
  p.null_layout = weight(1, d, r, 0.5);
  p.null_embedding = weight(1, d, r, 0.5);
  return p;
}

void randomize_zero_init(ModelParams& params, std::uint64_t seed, double stddev) {
  Rng rng(seed, 0x72616e64);
  auto fill = [&](Tensor& t) {
    for (auto& v : t.mutable_data()) v = stddev * rng.normal();
  };
  for (auto& b : params.blocks) {
    fill(b.ada_w);
    fill(b.ada_b);
  }
  fill(params.final_ada_w);
  fill(params.final_ada_b);
  fill(params.head_w);
  fill(params.head_b);
}

std::vector<std::pair<std::string, Tensor>> ModelParams::named() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("t_mlp.w1", t_w1);
  out.emplace_back("t_mlp.b1", t_b1);
  out.emplace_back("t_mlp.w2", t_w2);
  out.emplace_back("t_mlp.b2", t_b2);
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const auto& bp = blocks[b];
    const std::string pre = "blocks." + std::to_string(b) + ".";
    for (std::size_t k = 0; k < 3; ++k) {
      const std::string ap = pre + "attn." + kPairNames[k] + ".";
      const auto& a = bp.attn[k];
      out.emplace_back(ap + "q_image", a.q_a);
      out.emplace_back(ap + "k_image", a.k_a);
      out.emplace_back(ap + "v_image", a.v_a);
      out.emplace_back(ap + "o_image", a.o_a);
      out.emplace_back(ap + "q_cond", a.q_b);
      out.emplace_back(ap + "k_cond", a.k_b);
      out.emplace_back(ap + "v_cond", a.v_b);
      out.emplace_back(ap + "o_cond", a.o_b);
      out.emplace_back(pre + "attn_norm." + kPairNames[k] + ".gain", bp.cond_attn_norm[k].gain);
      out.emplace_back(pre + "attn_norm." + kPairNames[k] + ".bias", bp.cond_attn_norm[k].bias);
      out.emplace_back(pre + "mlp_norm." + kPairNames[k] + ".gain", bp.cond_mlp_norm[k].gain);
      out.emplace_back(pre + "mlp_norm." + kPairNames[k] + ".bias", bp.cond_mlp_norm[k].bias);
    }
    for (std::size_t s = 0; s < 4; ++s) {
      const std::string mp = pre + "mlp." + kStreamNames[s] + ".";
      out.emplace_back(mp + "w1", bp.mlp[s].w1);
      out.emplace_back(mp + "b1", bp.mlp[s].b1);
      out.emplace_back(mp + "w2", bp.mlp[s].w2);
      out.emplace_back(mp + "b2", bp.mlp[s].b2);
    }
    out.emplace_back(pre + "ada.w", bp.ada_w);
    out.emplace_back(pre + "ada.b", bp.ada_b);
  }
  out.emplace_back("final.ada.w", final_ada_w);
  out.emplace_back("final.ada.b", final_ada_b);
  out.emplace_back("head.w", head_w);
  out.emplace_back("head.b", head_b);
  out.emplace_back("null.caption", null_caption);
  out.emplace_back("null.layout", null_layout);
  out.emplace_back("null.embedding", null_embedding);
  return out;
}

std::vector<Tensor> ModelParams::trainable() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named()) out.push_back(t);
  return out;
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (auto& [name, t] : named()) n += t.numel();
  return n;
}

ModelParams clone_params(const ModelParams& params) {
  ModelParams out = params;
  auto copy = [](Tensor& t) {
    const bool rg = t.requires_grad();
    t = t.clone();
    t.set_requires_grad(rg);
  };
  for (Tensor* t : {&out.t_w1, &out.t_b1, &out.t_w2, &out.t_b2, &out.final_ada_w, &out.final_ada_b, &out.head_w,
                    &out.head_b, &out.null_caption, &out.null_layout, &out.null_embedding})
    copy(*t);
  for (auto& b : out.blocks) {
    for (auto& a : b.attn)
      for (Tensor* t : {&a.q_a, &a.k_a, &a.v_a, &a.o_a, &a.q_b, &a.k_b, &a.v_b, &a.o_b}) copy(*t);
    for (auto* norms : {&b.cond_attn_norm, &b.cond_mlp_norm})
      for (auto& n : *norms) {
        copy(n.gain);
        copy(n.bias);
      }
    for (auto& m : b.mlp)
      for (Tensor* t : {&m.w1, &m.b1, &m.w2, &m.b2}) copy(*t);
    copy(b.ada_w);
    copy(b.ada_b);
  }
  return out;
}

Tensor timestep_features(std::size_t t, std::size_t dim, std::size_t steps) {
  if (t >= steps)
    throw ContractError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(steps) + ")");
  return Tensor({dim}, sinusoid(static_cast<double>(t), dim));
}

Tensor timestep_embed(const ModelParams& params, std::span<const std::size_t> steps) {
  const std::size_t d = params.config.d_model;
  std::vector<double> feats;
  feats.reserve(steps.size() * d);
  for (auto t : steps) {
    const auto f = timestep_features(t, d, params.config.steps);
    feats.insert(feats.end(), f.data().begin(), f.data().end());
  }
  const Tensor x({steps.size(), d}, std::move(feats));
  return linear(silu(linear(x, params.t_w1, params.t_b1)), params.t_w2, params.t_b2);
}

std::pair<StreamBatch, StreamBatch> mm_attention(const StreamBatch& a, const StreamBatch& b,
                                                 const AttentionParams& p) {
  if (a.tokens.cols() != b.tokens.cols())
    throw ShapeError("mm_attention: stream widths " + std::to_string(a.tokens.cols()) + " and " +
                     std::to_string(b.tokens.cols()) + " differ");
  if (a.batch() != b.batch()) throw ShapeError("mm_attention: batch sizes differ");
  if (p.q_a.rows() != a.tokens.cols()) throw ShapeError("mm_attention: parameters do not match stream width");
  const std::size_t batch = a.batch(), na = a.tokens.rows();

  // Per-sample joint sequence [a_s; b_s] as row indices into [A; B].
  std::vector<std::size_t> joint, joint_off{0}, a_pos, b_pos;
  joint.reserve(na + b.tokens.rows());
  for (std::size_t s = 0; s < batch; ++s) {
    for (std::size_t r = a.offsets[s]; r < a.offsets[s + 1]; ++r) {
      a_pos.push_back(joint.size());
      joint.push_back(r);
    }
    for (std::size_t r = b.offsets[s]; r < b.offsets[s + 1]; ++r) {
      b_pos.push_back(joint.size());
      joint.push_back(na + r);
    }
    joint_off.push_back(joint.size());
  }

  auto joint_of = [&](const Tensor& wa, const Tensor& wb) {
    const Tensor parts[] = {matmul(a.tokens, wa), matmul(b.tokens, wb)};
    return gather_rows(concat_tokens(parts), joint);
  };
  const Tensor q = joint_of(p.q_a, p.q_b);
  const Tensor k = joint_of(p.k_a, p.k_b);
  const Tensor v = joint_of(p.v_a, p.v_b);
  const Tensor o = attention(q, k, v, p.n_heads, joint_off);

  StreamBatch a_out{matmul(gather_rows(o, a_pos), p.o_a), a.offsets};
  StreamBatch b_out{matmul(gather_rows(o, b_pos), p.o_b), b.offsets};
  return {std::move(a_out), std::move(b_out)};
}

std::pair<TokenStream, TokenStream> mm_attention(const TokenStream& a, const TokenStream& b,
                                                 const AttentionParams& params) {
  StreamBatch sa{a.tokens, {0, a.size()}};
  StreamBatch sb{b.tokens, {0, b.size()}};
  auto [oa, ob] = mm_attention(sa, sb, params);
  TokenStream ra = a, rb = b;
  ra.tokens = oa.tokens;
  rb.tokens = ob.tokens;
  return {std::move(ra), std::move(rb)};
}

BlockStreams block_forward(const BlockStreams& in, const Tensor& conditioning, const BlockParams& block) {
  const std::size_t d = in.z.tokens.cols();
  if (conditioning.rows() != in.z.batch()) throw ShapeError("block_forward: conditioning batch mismatch");
  const Tensor mod = linear(conditioning, block.ada_w, block.ada_b);
  auto chunk = [&](std::size_t i) { return slice_cols(mod, i * d, d); };
  const auto& z_off = in.z.offsets;

  Tensor z = in.z.tokens;
  std::array<StreamBatch, 3> conds = {in.text, in.layout, in.embedding};
  for (std::size_t k = 0; k < 3; ++k) {
    const Tensor zn = modulate(layer_norm(z), chunk(3 * k), chunk(3 * k + 1), z_off);
    const Tensor cn = layer_norm(conds[k].tokens, block.cond_attn_norm[k].gain, block.cond_attn_norm[k].bias);
    auto [za, ca] = mm_attention(StreamBatch{zn, z_off}, StreamBatch{cn, conds[k].offsets}, block.attn[k]);
    z = gated_residual(z, za.tokens, chunk(3 * k + 2), z_off);
    conds[k].tokens = add(conds[k].tokens, ca.tokens);
  }
  const Tensor zn = modulate(layer_norm(z), chunk(9), chunk(10), z_off);
  z = gated_residual(z, mlp_forward(zn, block.mlp[0]), chunk(11), z_off);
  for (std::size_t k = 0; k < 3; ++k) {
    const Tensor cn = layer_norm(conds[k].tokens, block.cond_mlp_norm[k].gain, block.cond_mlp_norm[k].bias);
    conds[k].tokens = add(conds[k].tokens, mlp_forward(cn, block.mlp[k + 1]));
  }
  return {StreamBatch{z, z_off}, std::move(conds[0]), std::move(conds[1]), std::move(conds[2])};
}

ConditionBatch drop_condition(ConditionKind kind, ConditionBatch batch, const ModelParams& params) {
  const std::size_t n = batch.batch();
  const std::vector<std::size_t> idx(n, 0);
  auto null_stream = [&](const Tensor& token) { return StreamBatch{gather_rows(token, idx), uniform_offsets(n, 1)}; };
  switch (kind) {
    case ConditionKind::caption:
      batch.text = null_stream(params.null_caption);
      break;
    case ConditionKind::layout:
      batch.layout = null_stream(params.null_layout);
      break;
    case ConditionKind::embedding:
      batch.embedding = null_stream(params.null_embedding);
      break;
  }
  return batch;
}

ConditionBatch apply_drops(ConditionBatch batch, const DropSet& drop, const ModelParams& params) {
  for (auto kind : {ConditionKind::caption, ConditionKind::layout, ConditionKind::embedding})
    if (drop.contains(kind)) batch = drop_condition(kind, std::move(batch), params);
  return batch;
}

Tensor predict_epsilon_vectors(const ModelParams& params, const SurrogateEncoders& encoders,
                               std::span<const Tensor> z_t, std::span<const std::size_t> steps,
                               const ConditionBatch& conditions) {
  const auto& cfg = params.config;
  const std::size_t batch = z_t.size();
  if (batch == 0 || steps.size() != batch || conditions.batch() != batch ||
      conditions.layout.batch() != batch || conditions.embedding.batch() != batch)
    throw ConfigError("predict_epsilon: batch sizes of latents, steps and conditions differ");
  if (encoders.params().d_model != cfg.d_model || encoders.params().patch_size != cfg.patch_size ||
      encoders.params().latent_channels != cfg.latent_channels)
    throw ConfigError("predict_epsilon: encoder geometry does not match the model");
  const std::size_t d = cfg.d_model;

  // Image tokens are a frozen function of z_t plus the grid signal.
  const Tensor pos = grid_positions(cfg.grid_h(), cfg.grid_w(), d);
  std::vector<TokenStream> image;
  image.reserve(batch);
  for (const auto& z : z_t) {
    if (z.shape() != cfg.latent_shape())
      throw ConfigError("predict_epsilon: latent " + shape_str(z.shape()) + " does not match configured " +
                        shape_str(cfg.latent_shape()));
    NoGradGuard frozen;
    image.push_back(encoders.tokenize_latent(z));
  }
  BlockStreams streams{stack_streams(image, &pos), conditions.text, conditions.layout, conditions.embedding};

  const Tensor cond = silu(timestep_embed(params, steps));
  for (const auto& block : params.blocks) streams = block_forward(streams, cond, block);

  const Tensor fm = linear(cond, params.final_ada_w, params.final_ada_b);
  const Tensor zn = modulate(layer_norm(streams.z.tokens), slice_cols(fm, 0, d), slice_cols(fm, d, d),
                             streams.z.offsets);
  return linear(zn, params.head_w, params.head_b);
}

std::vector<Tensor> predict_epsilon(const ModelParams& params, const SurrogateEncoders& encoders,
                                    std::span<const Tensor> z_t, std::span<const std::size_t> steps,
                                    const ConditionBatch& conditions) {
  const auto& cfg = params.config;
  const Tensor vecs = predict_epsilon_vectors(params, encoders, z_t, steps, conditions);
  const std::size_t n = cfg.image_tokens(), w = cfg.patch_width();
  std::vector<Tensor> out;
  const auto src = vecs.data();
  for (std::size_t s = 0; s < z_t.size(); ++s) {
    Tensor part({n, w}, std::vector<double>(src.begin() + s * n * w, src.begin() + (s + 1) * n * w));
    out.push_back(unpatch_vectors(part, cfg.latent_channels, cfg.latent_h, cfg.latent_w, cfg.patch_size));
  }
  return out;
}

}  // namespace icdit
