// Structural layer: feed-forward sublayer, the three residual placement
// schemes, encoder/decoder blocks, halving distill layers with an optional
// half-length replica stack, the dense interpolation head, and the Model
// that wires everything into a forward pass.
//
// The free functions operate on explicit parameter structs so stacks can be
// composed and checked piecewise; Model owns a named parameter registry and
// drives the same functions.
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "chronoformer/attention.hpp"
#include "chronoformer/positional.hpp"
#include "chronoformer/tensor.hpp"

namespace chronoformer {

enum class NormPlacement { post_ln, pre_ln, rezero };
enum class AttentionVariant { canonical, probsparse, conv, logsparse };
enum class HeadKind { regression, classification };
enum class DecodeMode { teacher_forced, one_shot, autoregressive };

NormPlacement norm_placement_from_string(const std::string& name);
std::string to_string(NormPlacement p);
AttentionVariant attention_variant_from_string(const std::string& name);
std::string to_string(AttentionVariant v);
HeadKind head_kind_from_string(const std::string& name);
std::string to_string(HeadKind h);
DecodeMode decode_mode_from_string(const std::string& name);
std::string to_string(DecodeMode m);

constexpr double kLayerNormEps = 1e-5;

struct BlockConfig {
  int d_model = 0;
  int heads = 1;
  int head_size = 0;  // 0: d_model / heads
  int d_ff = 0;       // 0: 4 * d_model
  NormPlacement norm_placement = NormPlacement::post_ln;
  AttentionVariant attention_variant = AttentionVariant::canonical;
  int probsparse_u = 0;  // 0: ceil(5 ln n) at runtime
  double probsparse_c = 5.0;
  int conv_kernel = 3;      // conv attention variant only
  LogSparseSpec logsparse;  // logsparse attention variant only

  int resolved_head_size() const;
  int resolved_d_ff() const;
  void validate() const;
};

struct ModelConfig {
  int n_encoders = 1;
  int n_decoders = 1;
  BlockConfig block;
  bool distilling = false;
  bool replica = false;
  HeadKind head = HeadKind::regression;
  int classes = 0;          // classification only
  bool dense_interp = false;
  int interp_m = 0;         // dense interpolation factors
  int input_width = 1;      // covariates per time step
  int output_width = 1;     // predicted series per time step
  int window = 0;           // observed steps M
  int horizon = 0;          // predicted steps H
  int input_kernel = 1;     // input projection conv width, 1 or 3
  double pe_base = 1e4;
  PEVariant pe_variant = PEVariant::relative;
  bool use_stamps = false;
  std::uint64_t seed = 1;

  void validate() const;
};

// ---- parameter structs ------------------------------------------------

struct FeedForwardParams {
  Tensor w1, b1;  // d_ff x d, d_ff x 1
  Tensor w2, b2;  // d x d_ff, d x 1
};

// Per residual sublayer: layer-norm gain/bias, or the rezero scalar.
struct ResidualNorm {
  Tensor gain, bias;  // length d, post_ln / pre_ln
  Tensor alpha;       // single element, rezero
};

struct EncoderBlockParams {
  MultiHeadParams attn;
  FeedForwardParams ff;
  ResidualNorm norm_attn, norm_ff;
};

struct DecoderBlockParams {
  MultiHeadParams self_attn, cross_attn;
  FeedForwardParams ff;
  ResidualNorm norm_self, norm_cross, norm_ff;
};

struct DistillParams {
  Tensor kernel;  // d x d x 3
};

// ---- block operations --------------------------------------------------

// W2 relu(W1 X + b1) + b2, column-wise.
Tensor feed_forward(const Tensor& x, const FeedForwardParams& p);

// post_ln: LN(x + f(x)); pre_ln: x + f(LN(x)); rezero: x + alpha f(x).
Tensor residual_sublayer(const Tensor& x,
                         const std::function<Tensor(const Tensor&)>& f,
                         NormPlacement placement, const ResidualNorm& norm);

// The mask the configured variant attends through for length n.
AttentionMask encoder_self_mask(const BlockConfig& cfg, int n);

// Self-attention sublayer then feed-forward sublayer; d x n in and out.
// seed feeds the sampled-sparsity variant only.
Tensor encoder_block(const Tensor& x, const BlockConfig& cfg,
                     const EncoderBlockParams& p, std::uint64_t seed = 0,
                     CostCounter* cost = nullptr,
                     AttentionTrace* trace = nullptr,
                     const std::string& scope = "");

// Causal self-attention, cross attention against enc_out, feed-forward.
// The decoder always runs canonical attention.
Tensor decoder_block(const Tensor& y, const Tensor& enc_out,
                     const BlockConfig& cfg, const DecoderBlockParams& p,
                     CostCounter* cost = nullptr,
                     AttentionTrace* trace = nullptr,
                     const std::string& scope = "");

// Width-3 causal convolution, elu, stride-2 max pool: d x L -> d x ceil(L/2).
Tensor distill_layer(const Tensor& x, const DistillParams& p);

// Fixed quadratic interpolation weights: column m-1 (m in 1..M) sums
// H[:, t-1] * (1 - |M t / T - m| / M)^2 over t in 1..T. Output d x M.
Tensor dense_interpolation(const Tensor& h, int m);

// ---- model --------------------------------------------------------------

struct NamedParam {
  std::string name;
  Tensor tensor;  // shares storage with the structured views inside Model
};

// One forecasting instance: the observed window, the start token (last
// observed output-space step), and in teacher mode the ground-truth targets.
struct ModelInput {
  Tensor x;        // input_width x window
  Tensor start;    // output_width x 1
  Tensor targets;  // output_width x horizon, teacher mode only
  std::vector<StampFeatures> x_stamps;  // size window when stamps are on
  // Decoder-position stamps: the start token then each horizon step,
  // size horizon + 1 when stamps are on.
  std::vector<StampFeatures> y_stamps;
  long long first_pos = 0;  // absolute index of the window start
};

struct RunOptions {
  Tape* tape = nullptr;  // watch all parameters and record the pass
  CostCounter* cost = nullptr;
  AttentionTrace* trace = nullptr;
};

class Model {
 public:
  explicit Model(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  std::vector<NamedParam>& params() { return params_; }
  const std::vector<NamedParam>& params() const { return params_; }
  Tensor* find_param(const std::string& name);

  // Input projection plus positional information, d_model x window.
  Tensor embed_encoder_input(const Tensor& x,
                             const std::vector<StampFeatures>* stamps,
                             long long first_pos, const RunOptions& opt);

  // Encoder stack output (with distilling/replica applied when configured).
  Tensor encode(const Tensor& x, const std::vector<StampFeatures>* stamps,
                long long first_pos, const RunOptions& opt);

  // Decoder states for output-space values laid out as columns; column j
  // carries series position window - 1 + j for positional purposes.
  Tensor decode(const Tensor& dec_values, const Tensor& enc_out,
                const std::vector<StampFeatures>* stamps, long long first_pos,
                const RunOptions& opt);

  // Predictions: output_width x horizon for regression, 1 x classes
  // (softmax) for classification. Teacher mode feeds ground truth shifted
  // one step; one_shot feeds the start token plus zero placeholders and
  // reads every horizon step from the single pass; autoregressive feeds
  // each prediction back and decodes again (decode_calls goes up by H).
  Tensor forward(const ModelInput& in, DecodeMode mode, const RunOptions& opt);

  int encode_calls() const { return encode_calls_; }
  int decode_calls() const { return decode_calls_; }
  void reset_counters() { encode_calls_ = decode_calls_ = 0; }

 private:
  Tensor reg(const std::string& name, std::vector<int> shape, int fan_in,
             int fan_out);  // xavier
  Tensor reg_const(const std::string& name, std::vector<int> shape,
                   double value);
  MultiHeadParams make_attention(const std::string& prefix, bool conv_qk);
  FeedForwardParams make_ff(const std::string& prefix);
  ResidualNorm make_norm(const std::string& prefix);
  EncoderBlockParams make_encoder(const std::string& prefix);
  Tensor watched(const Tensor& t, const RunOptions& opt) const;
  Tensor run_encoder_stack(Tensor h, const std::vector<EncoderBlockParams>& blocks,
                           const std::vector<DistillParams>& distills,
                           const RunOptions& opt, const std::string& scope);
  Tensor head_from_pooled(const Tensor& pooled, const RunOptions& opt);

  ModelConfig cfg_;
  std::vector<NamedParam> params_;
  Tensor input_proj_;  // d x input_width (x input_kernel when 3)
  Tensor dec_proj_;    // d x output_width
  std::vector<EncoderBlockParams> enc_;
  std::vector<DistillParams> dist_;
  std::vector<EncoderBlockParams> replica_enc_;
  std::vector<DistillParams> replica_dist_;
  std::vector<DecoderBlockParams> dec_;
  Tensor head_w_, head_b_;
  StampTables stamps_;
  int encode_calls_ = 0;
  int decode_calls_ = 0;
};

}  // namespace chronoformer
