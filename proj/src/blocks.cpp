#include "chronoformer/blocks.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>

#include "chronoformer/error.hpp"
#include "chronoformer/rng.hpp"
#include "chronoformer/training.hpp"

namespace chronoformer {

namespace {

void require_matrix(const Tensor& t, int rows, int cols, const char* what) {
  if (t.ndim() != 2 || t.dim(0) != rows || t.dim(1) != cols) {
    throw DimensionError(std::string(what) + " must be " +
                         std::to_string(rows) + "x" + std::to_string(cols) +
                         ", got " + shape_str(t.shape()));
  }
}

void require_rows(const Tensor& t, int rows, const char* what) {
  if (t.ndim() != 2 || t.dim(0) != rows) {
    throw DimensionError(std::string(what) + " must have " +
                         std::to_string(rows) + " rows, got " +
                         shape_str(t.shape()));
  }
}

int ceil_half(int n) { return (n + 1) / 2; }

}  // namespace

// ---- enum names -----------------------------------------------------------

NormPlacement norm_placement_from_string(const std::string& name) {
  if (name == "post_ln") return NormPlacement::post_ln;
  if (name == "pre_ln") return NormPlacement::pre_ln;
  if (name == "rezero") return NormPlacement::rezero;
  throw ConfigError("unknown norm placement '" + name + "'");
}

std::string to_string(NormPlacement p) {
  switch (p) {
    case NormPlacement::post_ln: return "post_ln";
    case NormPlacement::pre_ln: return "pre_ln";
    case NormPlacement::rezero: return "rezero";
  }
  return "?";
}

AttentionVariant attention_variant_from_string(const std::string& name) {
  if (name == "canonical") return AttentionVariant::canonical;
  if (name == "probsparse") return AttentionVariant::probsparse;
  if (name == "conv") return AttentionVariant::conv;
  if (name == "logsparse") return AttentionVariant::logsparse;
  throw ConfigError("unknown attention variant '" + name + "'");
}

std::string to_string(AttentionVariant v) {
  switch (v) {
    case AttentionVariant::canonical: return "canonical";
    case AttentionVariant::probsparse: return "probsparse";
    case AttentionVariant::conv: return "conv";
    case AttentionVariant::logsparse: return "logsparse";
  }
  return "?";
}

HeadKind head_kind_from_string(const std::string& name) {
  if (name == "regression") return HeadKind::regression;
  if (name == "classification") return HeadKind::classification;
  throw ConfigError("unknown head kind '" + name + "'");
}

std::string to_string(HeadKind h) {
  return h == HeadKind::regression ? "regression" : "classification";
}

DecodeMode decode_mode_from_string(const std::string& name) {
  if (name == "teacher_forced") return DecodeMode::teacher_forced;
  if (name == "one_shot") return DecodeMode::one_shot;
  if (name == "autoregressive") return DecodeMode::autoregressive;
  throw ConfigError("unknown decode mode '" + name + "'");
}

std::string to_string(DecodeMode m) {
  switch (m) {
    case DecodeMode::teacher_forced: return "teacher_forced";
    case DecodeMode::one_shot: return "one_shot";
    case DecodeMode::autoregressive: return "autoregressive";
  }
  return "?";
}

// ---- configs ----------------------------------------------------------

int BlockConfig::resolved_head_size() const {
  if (head_size > 0) return head_size;
  if (heads < 1 || d_model % heads != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) +
                      " is not divisible into " + std::to_string(heads) +
                      " heads; set head_size explicitly");
  }
  return d_model / heads;
}

int BlockConfig::resolved_d_ff() const { return d_ff > 0 ? d_ff : 4 * d_model; }

void BlockConfig::validate() const {
  if (d_model < 2 || d_model % 2 != 0) {
    throw ConfigError("d_model must be even and at least 2, got " +
                      std::to_string(d_model));
  }
  if (heads < 1) throw ConfigError("heads must be at least 1");
  (void)resolved_head_size();
  if (resolved_d_ff() < 1) throw ConfigError("d_ff must be at least 1");
  if (attention_variant == AttentionVariant::conv && conv_kernel < 1) {
    throw ConfigError("conv attention kernel must be positive");
  }
  if (attention_variant == AttentionVariant::probsparse &&
      probsparse_c <= 0.0) {
    throw ConfigError("probsparse sampling factor must be positive");
  }
}

void ModelConfig::validate() const {
  block.validate();
  if (n_encoders < 1) throw ConfigError("need at least one encoder block");
  if (n_decoders < 0) throw ConfigError("negative decoder count");
  if (distilling && n_encoders < 2) {
    throw ConfigError("distilling needs at least two encoder blocks");
  }
  if (replica && !distilling) {
    throw ConfigError("the replica stack requires distilling");
  }
  if (input_width < 1) throw ConfigError("input width must be at least 1");
  if (output_width < 1) throw ConfigError("output width must be at least 1");
  if (window < 1) throw ConfigError("window must be at least 1");
  if (input_kernel != 1 && input_kernel != 3) {
    throw ConfigError("input projection kernel must be 1 or 3");
  }
  if (head == HeadKind::classification) {
    if (n_decoders != 0) {
      throw ConfigError("classification heads are encoder-only; set"
                        " n_decoders to 0");
    }
    if (classes < 2) throw ConfigError("classification needs >= 2 classes");
  } else {
    if (horizon < 1) throw ConfigError("regression horizon must be >= 1");
  }
  if (dense_interp) {
    if (n_decoders != 0) {
      throw ConfigError("dense interpolation is an encoder-only head");
    }
    if (interp_m < 1) throw ConfigError("interp_m must be >= 1");
  }
  if (!(pe_base > 1.0)) throw ConfigError("pe_base must exceed 1");
}

// ---- block operations --------------------------------------------------

Tensor feed_forward(const Tensor& x, const FeedForwardParams& p) {
  Tensor inner = relu(add_col(matmul(p.w1, x), p.b1));
  return add_col(matmul(p.w2, inner), p.b2);
}

Tensor residual_sublayer(const Tensor& x,
                         const std::function<Tensor(const Tensor&)>& f,
                         NormPlacement placement, const ResidualNorm& norm) {
  switch (placement) {
    case NormPlacement::post_ln:
      return layer_norm(add(x, f(x)), norm.gain, norm.bias, kLayerNormEps);
    case NormPlacement::pre_ln:
      return add(x, f(layer_norm(x, norm.gain, norm.bias, kLayerNormEps)));
    case NormPlacement::rezero:
      return add(x, scalar_mul(norm.alpha, f(x)));
  }
  throw ContractError("unhandled norm placement");
}

AttentionMask encoder_self_mask(const BlockConfig& cfg, int n) {
  switch (cfg.attention_variant) {
    case AttentionVariant::canonical:
    case AttentionVariant::probsparse:
      return AttentionMask::full(n);
    case AttentionVariant::conv:
      // Convolutional query/key generation reads the past, so the mask does
      // too: the pair came from the same sparse-decoder design.
      return AttentionMask::causal(n);
    case AttentionVariant::logsparse:
      return build_logsparse_mask(n, cfg.logsparse);
  }
  throw ContractError("unhandled attention variant");
}

namespace {

// Multi-head wrapper over the sampled-sparsity kernel: project per head,
// run the sparse attention, fold heads back through w_o.
Tensor probsparse_multi_head(const Tensor& x, const BlockConfig& cfg,
                             const MultiHeadParams& p,
                             const AttentionMask& mask, std::uint64_t seed,
                             CostCounter* cost, AttentionTrace* trace,
                             const std::string& scope) {
  p.validate();
  const int n = x.dim(1);
  int u = cfg.probsparse_u > 0 ? std::min(cfg.probsparse_u, n)
                               : probsparse_auto_u(n, cfg.probsparse_c);
  std::vector<Tensor> heads;
  for (int h = 0; h < p.heads(); ++h) {
    QKV qkv = project_qkv(x, p, h);
    Tensor w;
    Tensor z = probsparse_attention(qkv.q, qkv.k, qkv.v, mask, u,
                                    mix_seed(seed, static_cast<std::uint64_t>(h)),
                                    cfg.probsparse_c, cost,
                                    trace ? &w : nullptr);
    if (trace) trace->items.push_back({scope, h, w});
    heads.push_back(z);
  }
  return matmul(p.w_o, concat_rows(heads));
}

}  // namespace

Tensor encoder_block(const Tensor& x, const BlockConfig& cfg,
                     const EncoderBlockParams& p, std::uint64_t seed,
                     CostCounter* cost, AttentionTrace* trace,
                     const std::string& scope) {
  cfg.validate();
  if (x.ndim() != 2 || x.dim(0) != cfg.d_model) {
    throw DimensionError("encoder block input must have " +
                         std::to_string(cfg.d_model) + " rows, got " +
                         shape_str(x.shape()));
  }
  const AttentionMask mask = encoder_self_mask(cfg, x.dim(1));
  auto attn = [&](const Tensor& h) {
    switch (cfg.attention_variant) {
      case AttentionVariant::probsparse:
        return probsparse_multi_head(h, cfg, p.attn, mask, seed, cost, trace,
                                     scope + ".attn");
      case AttentionVariant::conv:
        return conv_self_attention(h, p.attn, cfg.conv_kernel, mask, cost,
                                   trace, scope + ".attn");
      default:
        return multi_head_attention(h, p.attn, mask, cost, trace,
                                    scope + ".attn");
    }
  };
  auto ff = [&](const Tensor& h) { return feed_forward(h, p.ff); };
  Tensor a = residual_sublayer(x, attn, cfg.norm_placement, p.norm_attn);
  return residual_sublayer(a, ff, cfg.norm_placement, p.norm_ff);
}

Tensor decoder_block(const Tensor& y, const Tensor& enc_out,
                     const BlockConfig& cfg, const DecoderBlockParams& p,
                     CostCounter* cost, AttentionTrace* trace,
                     const std::string& scope) {
  cfg.validate();
  if (y.ndim() != 2 || y.dim(0) != cfg.d_model || enc_out.ndim() != 2 ||
      enc_out.dim(0) != cfg.d_model) {
    throw DimensionError("decoder block expects " +
                         std::to_string(cfg.d_model) +
                         "-row state and encoder output, got " +
                         shape_str(y.shape()) + " and " +
                         shape_str(enc_out.shape()));
  }
  const int m = y.dim(1), n = enc_out.dim(1);
  auto self = [&](const Tensor& h) {
    return multi_head_attention(h, p.self_attn, AttentionMask::causal(m),
                                cost, trace, scope + ".self");
  };
  auto cross = [&](const Tensor& h) {
    return multi_head_cross_attention(h, enc_out, p.cross_attn,
                                      AttentionMask::full(m, n), cost, trace,
                                      scope + ".cross");
  };
  auto ff = [&](const Tensor& h) { return feed_forward(h, p.ff); };
  Tensor a = residual_sublayer(y, self, cfg.norm_placement, p.norm_self);
  Tensor b = residual_sublayer(a, cross, cfg.norm_placement, p.norm_cross);
  return residual_sublayer(b, ff, cfg.norm_placement, p.norm_ff);
}

Tensor distill_layer(const Tensor& x, const DistillParams& p) {
  if (x.ndim() != 2 || x.dim(1) < 2) {
    throw DimensionError("distill layer needs at least 2 time steps, got " +
                         shape_str(x.shape()));
  }
  return maxpool1d_stride2(elu(causal_conv1d(x, p.kernel)));
}

Tensor dense_interpolation(const Tensor& h, int m) {
  if (m < 1) throw ConfigError("dense interpolation needs m >= 1");
  if (h.ndim() != 2 || h.dim(1) < 1) {
    throw DimensionError("dense interpolation input must be d x T, got " +
                         shape_str(h.shape()));
  }
  const int t_len = h.dim(1);
  Tensor w({t_len, m});
  for (int t = 1; t <= t_len; ++t) {
    const double s = static_cast<double>(m) * t / t_len;
    for (int f = 1; f <= m; ++f) {
      const double base = 1.0 - std::fabs(s - f) / m;
      w.at(t - 1, f - 1) = base * base;
    }
  }
  return matmul(h, w);
}

// ---- model -----------------------------------------------------------

Tensor Model::reg(const std::string& name, std::vector<int> shape, int fan_in,
                  int fan_out) {
  const std::uint64_t seed =
      mix_seed(cfg_.seed, static_cast<std::uint64_t>(params_.size()) + 1);
  Tensor t = xavier_init(std::move(shape), fan_in, fan_out, seed);
  params_.push_back({name, t});
  return t;
}

Tensor Model::reg_const(const std::string& name, std::vector<int> shape,
                        double value) {
  Tensor t = Tensor::full(std::move(shape), value);
  params_.push_back({name, t});
  return t;
}

MultiHeadParams Model::make_attention(const std::string& prefix,
                                      bool conv_qk) {
  const int d = cfg_.block.d_model;
  const int s = cfg_.block.resolved_head_size();
  const int k = cfg_.block.conv_kernel;
  MultiHeadParams p;
  for (int h = 0; h < cfg_.block.heads; ++h) {
    const std::string hs = std::to_string(h);
    if (conv_qk && k > 1) {
      p.w_q.push_back(reg(prefix + ".q" + hs, {s, d, k}, d * k, s * k));
      p.w_k.push_back(reg(prefix + ".k" + hs, {s, d, k}, d * k, s * k));
    } else {
      p.w_q.push_back(reg(prefix + ".q" + hs, {s, d}, d, s));
      p.w_k.push_back(reg(prefix + ".k" + hs, {s, d}, d, s));
    }
    p.w_v.push_back(reg(prefix + ".v" + hs, {s, d}, d, s));
  }
  p.w_o = reg(prefix + ".o", {d, cfg_.block.heads * s},
              cfg_.block.heads * s, d);
  return p;
}

FeedForwardParams Model::make_ff(const std::string& prefix) {
  const int d = cfg_.block.d_model;
  const int f = cfg_.block.resolved_d_ff();
  FeedForwardParams p;
  p.w1 = reg(prefix + ".w1", {f, d}, d, f);
  p.b1 = reg_const(prefix + ".b1", {f, 1}, 0.0);
  p.w2 = reg(prefix + ".w2", {d, f}, f, d);
  p.b2 = reg_const(prefix + ".b2", {d, 1}, 0.0);
  return p;
}

ResidualNorm Model::make_norm(const std::string& prefix) {
  ResidualNorm n;
  if (cfg_.block.norm_placement == NormPlacement::rezero) {
    n.alpha = reg_const(prefix + ".alpha", {1}, 0.0);
  } else {
    n.gain = reg_const(prefix + ".gain", {cfg_.block.d_model}, 1.0);
    n.bias = reg_const(prefix + ".bias", {cfg_.block.d_model}, 0.0);
  }
  return n;
}

EncoderBlockParams Model::make_encoder(const std::string& prefix) {
  EncoderBlockParams p;
  p.attn = make_attention(
      prefix + ".attn",
      cfg_.block.attention_variant == AttentionVariant::conv);
  p.norm_attn = make_norm(prefix + ".norm1");
  p.ff = make_ff(prefix + ".ff");
  p.norm_ff = make_norm(prefix + ".norm2");
  return p;
}

Model::Model(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const int d = cfg_.block.d_model;
  if (cfg_.input_kernel == 1) {
    input_proj_ = reg("input.proj", {d, cfg_.input_width}, cfg_.input_width, d);
  } else {
    input_proj_ = reg("input.proj", {d, cfg_.input_width, cfg_.input_kernel},
                      cfg_.input_width * cfg_.input_kernel,
                      d * cfg_.input_kernel);
  }
  for (int i = 0; i < cfg_.n_encoders; ++i) {
    enc_.push_back(make_encoder("enc" + std::to_string(i)));
    if (cfg_.distilling) {
      DistillParams dp;
      dp.kernel = reg("distill" + std::to_string(i) + ".kernel", {d, d, 3},
                      d * 3, d * 3);
      dist_.push_back(dp);
    }
  }
  if (cfg_.replica) {
    for (int i = 0; i + 1 < cfg_.n_encoders; ++i) {
      replica_enc_.push_back(make_encoder("replica" + std::to_string(i)));
      DistillParams dp;
      dp.kernel = reg("replica_distill" + std::to_string(i) + ".kernel",
                      {d, d, 3}, d * 3, d * 3);
      replica_dist_.push_back(dp);
    }
  }
  for (int i = 0; i < cfg_.n_decoders; ++i) {
    const std::string prefix = "dec" + std::to_string(i);
    DecoderBlockParams p;
    p.self_attn = make_attention(prefix + ".self", false);
    p.norm_self = make_norm(prefix + ".norm1");
    p.cross_attn = make_attention(prefix + ".cross", false);
    p.norm_cross = make_norm(prefix + ".norm2");
    p.ff = make_ff(prefix + ".ff");
    p.norm_ff = make_norm(prefix + ".norm3");
    dec_.push_back(std::move(p));
  }
  if (cfg_.n_decoders > 0) {
    dec_proj_ = reg("decoder.proj", {d, cfg_.output_width},
                    cfg_.output_width, d);
    head_w_ = reg("head.w", {cfg_.output_width, d}, d, cfg_.output_width);
    head_b_ = reg_const("head.b", {cfg_.output_width, 1}, 0.0);
  } else {
    const int pooled = cfg_.dense_interp ? d * cfg_.interp_m : d;
    const int out = cfg_.head == HeadKind::classification
                        ? cfg_.classes
                        : cfg_.output_width * cfg_.horizon;
    head_w_ = reg("head.w", {out, pooled}, pooled, out);
    head_b_ = reg_const("head.b", {out, 1}, 0.0);
  }
  if (cfg_.use_stamps) {
    stamps_ = StampTables::zeros(d);
    params_.push_back({"stamp.minute", stamps_.minute});
    params_.push_back({"stamp.day", stamps_.day});
    params_.push_back({"stamp.holiday", stamps_.holiday});
  }
}

Tensor* Model::find_param(const std::string& name) {
  for (NamedParam& p : params_) {
    if (p.name == name) return &p.tensor;
  }
  return nullptr;
}

Tensor Model::watched(const Tensor& t, const RunOptions& opt) const {
  return opt.tape ? opt.tape->watch(t) : t;
}

namespace {

std::vector<StampFeatures> slice_stamps(const std::vector<StampFeatures>& fs,
                                        int start, int len, const char* what) {
  if (static_cast<int>(fs.size()) < start + len) {
    throw DimensionError(std::string(what) + " needs " +
                         std::to_string(start + len) + " stamps, got " +
                         std::to_string(fs.size()));
  }
  return std::vector<StampFeatures>(fs.begin() + start,
                                    fs.begin() + start + len);
}

}  // namespace

Tensor Model::embed_encoder_input(const Tensor& x,
                                  const std::vector<StampFeatures>* stamps,
                                  long long first_pos, const RunOptions& opt) {
  require_rows(x, cfg_.input_width, "encoder input");
  const int n = x.dim(1);
  Tensor h = causal_conv1d(x, watched(input_proj_, opt));
  PESpec spec{cfg_.block.d_model, cfg_.pe_base, cfg_.pe_variant};
  std::vector<long long> positions(static_cast<std::size_t>(n));
  for (int j = 0; j < n; ++j) positions[j] = first_pos + j;
  Tensor pe = traffic_pe(positions, spec, stamps);
  h = add(h, pe);
  if (cfg_.use_stamps) {
    if (stamps == nullptr) {
      throw ConfigError("model built with stamp tables needs stamp features");
    }
    StampTables wt;
    wt.minute = watched(stamps_.minute, opt);
    wt.day = watched(stamps_.day, opt);
    wt.holiday = watched(stamps_.holiday, opt);
    h = add(h, stamp_matrix(*stamps, wt));
  }
  return h;
}

Tensor Model::run_encoder_stack(Tensor h,
                                const std::vector<EncoderBlockParams>& blocks,
                                const std::vector<DistillParams>& distills,
                                const RunOptions& opt,
                                const std::string& scope) {
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    EncoderBlockParams wp;
    wp.attn.w_o = watched(blocks[i].attn.w_o, opt);
    for (int hh = 0; hh < blocks[i].attn.heads(); ++hh) {
      wp.attn.w_q.push_back(watched(blocks[i].attn.w_q[hh], opt));
      wp.attn.w_k.push_back(watched(blocks[i].attn.w_k[hh], opt));
      wp.attn.w_v.push_back(watched(blocks[i].attn.w_v[hh], opt));
    }
    wp.ff.w1 = watched(blocks[i].ff.w1, opt);
    wp.ff.b1 = watched(blocks[i].ff.b1, opt);
    wp.ff.w2 = watched(blocks[i].ff.w2, opt);
    wp.ff.b2 = watched(blocks[i].ff.b2, opt);
    auto watch_norm = [&](const ResidualNorm& n) {
      ResidualNorm w;
      if (n.alpha.defined()) w.alpha = watched(n.alpha, opt);
      if (n.gain.defined()) w.gain = watched(n.gain, opt);
      if (n.bias.defined()) w.bias = watched(n.bias, opt);
      return w;
    };
    wp.norm_attn = watch_norm(blocks[i].norm_attn);
    wp.norm_ff = watch_norm(blocks[i].norm_ff);
    h = encoder_block(h, cfg_.block, wp,
                      mix_seed(cfg_.seed, 0x9e00 + i), opt.cost, opt.trace,
                      scope + std::to_string(i));
    if (!distills.empty()) {
      h = distill_layer(h, {watched(distills[i].kernel, opt)});
    }
  }
  return h;
}

Tensor Model::encode(const Tensor& x, const std::vector<StampFeatures>* stamps,
                     long long first_pos, const RunOptions& opt) {
  ++encode_calls_;
  Tensor h0 = embed_encoder_input(x, stamps, first_pos, opt);
  Tensor main_out = run_encoder_stack(h0, enc_, dist_, opt, "enc");
  if (!cfg_.replica) return main_out;
  const int L = h0.dim(1);
  const int half = ceil_half(L);
  Tensor tail = slice_cols(h0, L - half, half);
  Tensor rep_out =
      run_encoder_stack(tail, replica_enc_, replica_dist_, opt, "replica");
  if (rep_out.dim(1) != main_out.dim(1)) {
    throw ConfigError("replica output extent " +
                      std::to_string(rep_out.dim(1)) +
                      " does not match the main stack's " +
                      std::to_string(main_out.dim(1)));
  }
  return concat_cols({main_out, rep_out});
}

Tensor Model::decode(const Tensor& dec_values, const Tensor& enc_out,
                     const std::vector<StampFeatures>* stamps,
                     long long first_pos, const RunOptions& opt) {
  ++decode_calls_;
  if (cfg_.n_decoders == 0) {
    throw ConfigError("model has no decoder blocks");
  }
  require_rows(dec_values, cfg_.output_width, "decoder values");
  const int m = dec_values.dim(1);
  Tensor h = matmul(watched(dec_proj_, opt), dec_values);
  // Column j continues the series at position window - 1 + j.
  PESpec spec{cfg_.block.d_model, cfg_.pe_base, cfg_.pe_variant};
  const bool periodic = cfg_.pe_variant == PEVariant::periodic_daily ||
                        cfg_.pe_variant == PEVariant::periodic_weekly;
  Tensor pe;
  if (periodic) {
    pe = traffic_pe({}, spec, stamps);
    if (pe.dim(1) != m) {
      throw DimensionError("decoder stamps cover " + std::to_string(pe.dim(1)) +
                           " positions for " + std::to_string(m) + " columns");
    }
  } else {
    const long long base =
        cfg_.pe_variant == PEVariant::global ? first_pos : 0;
    pe = pe_matrix(m, spec, base + cfg_.window - 1);
  }
  h = add(h, pe);
  if (cfg_.use_stamps) {
    if (stamps == nullptr) {
      throw ConfigError("model built with stamp tables needs stamp features");
    }
    StampTables wt;
    wt.minute = watched(stamps_.minute, opt);
    wt.day = watched(stamps_.day, opt);
    wt.holiday = watched(stamps_.holiday, opt);
    h = add(h, stamp_matrix(*stamps, wt));
  }
  for (std::size_t i = 0; i < dec_.size(); ++i) {
    DecoderBlockParams wp;
    auto watch_attn = [&](const MultiHeadParams& a) {
      MultiHeadParams w;
      for (int hh = 0; hh < a.heads(); ++hh) {
        w.w_q.push_back(watched(a.w_q[hh], opt));
        w.w_k.push_back(watched(a.w_k[hh], opt));
        w.w_v.push_back(watched(a.w_v[hh], opt));
      }
      w.w_o = watched(a.w_o, opt);
      return w;
    };
    auto watch_norm = [&](const ResidualNorm& n) {
      ResidualNorm w;
      if (n.alpha.defined()) w.alpha = watched(n.alpha, opt);
      if (n.gain.defined()) w.gain = watched(n.gain, opt);
      if (n.bias.defined()) w.bias = watched(n.bias, opt);
      return w;
    };
    wp.self_attn = watch_attn(dec_[i].self_attn);
    wp.cross_attn = watch_attn(dec_[i].cross_attn);
    wp.ff.w1 = watched(dec_[i].ff.w1, opt);
    wp.ff.b1 = watched(dec_[i].ff.b1, opt);
    wp.ff.w2 = watched(dec_[i].ff.w2, opt);
    wp.ff.b2 = watched(dec_[i].ff.b2, opt);
    wp.norm_self = watch_norm(dec_[i].norm_self);
    wp.norm_cross = watch_norm(dec_[i].norm_cross);
    wp.norm_ff = watch_norm(dec_[i].norm_ff);
    h = decoder_block(h, enc_out, cfg_.block, wp, opt.cost, opt.trace,
                      "dec" + std::to_string(i));
  }
  return h;
}

Tensor Model::head_from_pooled(const Tensor& pooled, const RunOptions& opt) {
  Tensor flat = reshape(pooled, {pooled.dim(0) * pooled.dim(1), 1});
  Tensor out = add_col(matmul(watched(head_w_, opt), flat),
                       watched(head_b_, opt));
  if (cfg_.head == HeadKind::classification) {
    return softmax_rows(reshape(out, {1, cfg_.classes}));
  }
  return reshape(out, {cfg_.output_width, cfg_.horizon});
}

Tensor Model::forward(const ModelInput& in, DecodeMode mode,
                      const RunOptions& opt) {
  require_matrix(in.x, cfg_.input_width, cfg_.window, "window");
  const std::vector<StampFeatures>* xst =
      in.x_stamps.empty() ? nullptr : &in.x_stamps;
  Tensor enc_out = encode(in.x, xst, in.first_pos, opt);

  if (cfg_.n_decoders == 0) {
    Tensor pooled;
    if (cfg_.dense_interp) {
      pooled = dense_interpolation(enc_out, cfg_.interp_m);
    } else {
      // Mean over time, kept as a matmul so gradients flow.
      const int t_len = enc_out.dim(1);
      pooled = matmul(enc_out, Tensor::full({t_len, 1}, 1.0 / t_len));
    }
    return head_from_pooled(pooled, opt);
  }

  require_matrix(in.start, cfg_.output_width, 1, "start token");
  const int h_len = cfg_.horizon;
  const bool stamped = cfg_.use_stamps ||
                       cfg_.pe_variant == PEVariant::periodic_daily ||
                       cfg_.pe_variant == PEVariant::periodic_weekly;
  std::vector<StampFeatures> ys;
  if (stamped) {
    ys = slice_stamps(in.y_stamps, 0, h_len + 1, "decoder path");
  }

  if (mode == DecodeMode::autoregressive) {
    Tensor cols = in.start;
    std::vector<Tensor> preds;
    for (int h = 1; h <= h_len; ++h) {
      std::vector<StampFeatures> st;
      const std::vector<StampFeatures>* stp = nullptr;
      if (stamped) {
        st = slice_stamps(ys, 0, h, "autoregressive step");
        stp = &st;
      }
      Tensor states = decode(cols, enc_out, stp, in.first_pos, opt);
      Tensor last = slice_cols(states, h - 1, 1);
      Tensor pred = add_col(matmul(watched(head_w_, opt), last),
                            watched(head_b_, opt));
      preds.push_back(pred);
      if (h < h_len) cols = concat_cols({cols, pred});
    }
    return preds.size() == 1 ? preds[0] : concat_cols(preds);
  }

  Tensor dec_in;
  int read_cols = h_len;
  if (mode == DecodeMode::teacher_forced) {
    require_matrix(in.targets, cfg_.output_width, h_len, "targets");
    if (h_len == 1) {
      dec_in = in.start;
    } else {
      dec_in = concat_cols({in.start, slice_cols(in.targets, 0, h_len - 1)});
    }
  } else {
    dec_in = concat_cols(
        {in.start, Tensor({cfg_.output_width, h_len})});
  }
  std::vector<StampFeatures> st;
  const std::vector<StampFeatures>* stp = nullptr;
  if (stamped) {
    st = slice_stamps(ys, 0, dec_in.dim(1), "decoder");
    stp = &st;
  }
  Tensor states = decode(dec_in, enc_out, stp, in.first_pos, opt);
  Tensor read = states.dim(1) == read_cols
                    ? states
                    : slice_cols(states, 0, read_cols);
  return add_col(matmul(watched(head_w_, opt), read),
                 watched(head_b_, opt));
}

}  // namespace chronoformer
