#pragma once

#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "editproc/autodiff.hpp"
#include "editproc/edit_ops.hpp"
#include "editproc/tokenizer.hpp"

namespace editproc {

using ad::Mat;
using ad::Param;
using ad::Tape;
using ad::Var;

struct ModelConfig {
  int d_model = 256;
  int n_heads = 4;
  int ff_dim = 1024;
  int enc_layers = 4;
  int dec_layers = 4;
  int order_n = 1;        // Markov order: how many previous revisions condition a step
  int vocab_size = 0;
  int max_len = 512;
  int max_history_spans = 64;
  double dropout = 0.0;
  enum class Mode { editpro, seq2seq } mode = Mode::editpro;

  void validate() const {
    require(d_model > 0 && n_heads > 0 && ff_dim > 0, "model dims must be positive");
    require(d_model % n_heads == 0, "d_model must be divisible by n_heads");
    require(enc_layers > 0 && dec_layers > 0, "layer counts must be positive");
    require(order_n >= 1, "order_n must be at least 1");
    require(vocab_size >= Vocabulary::kNumSpecials, "vocab_size too small");
    require(max_len > 1 && max_history_spans > 0, "max_len/max_history_spans must be positive");
    require(dropout >= 0.0 && dropout < 1.0, "dropout must be in [0,1)");
  }

  static const char* mode_name(Mode m) { return m == Mode::editpro ? "editpro" : "seq2seq"; }
  static Mode mode_from_name(const std::string& s) {
    if (s == "editpro") return Mode::editpro;
    if (s == "seq2seq") return Mode::seq2seq;
    fail("unknown model mode: " + s);
  }
};

// Index of the synthetic beginning-of-sequence tag fed to the tagger at
// position 0; rows 0..3 of tag_emb are the real operations.
constexpr int kBosTagRow = kNumOps;

struct LinearP {
  Param* w = nullptr;
  Param* b = nullptr;
};
struct LayerNormP {
  Param* gamma = nullptr;
  Param* beta = nullptr;
};
struct AttentionP {
  LinearP q, k, v, o;
};
struct FfnP {
  LinearP in, out;
};
struct EncLayerP {
  LayerNormP ln1;
  AttentionP self_attn;
  LayerNormP lnh;        // only allocated when order_n > 1
  AttentionP hist_attn;  // ditto
  LayerNormP ln2;
  FfnP ffn;
};
struct DecLayerP {
  LayerNormP ln1;
  AttentionP self_attn;
  LayerNormP ln2;
  AttentionP cross_attn;
  LayerNormP ln3;
  FfnP ffn;
};

// All learnable arrays. Construction allocates and initializes: fan-in scaled
// uniform for weights, zeros for biases, ones for layer-norm gains, and
// all-zero output projections so an untrained model scores tags and tokens
// uniformly (oPPL exactly 4, gPPL exactly vocab_size).
class ModelParams {
 public:
  ModelConfig config;

  Param* tok_emb = nullptr;  // vocab x d, shared by encoder and decoder inputs
  Param* pos_enc = nullptr;  // max_len x d
  Param* pos_dec = nullptr;  // max_len x d
  std::vector<EncLayerP> enc;
  LayerNormP enc_final;
  std::vector<DecLayerP> dec;
  LayerNormP dec_final;

  Param* tag_emb = nullptr;  // 5 x d: four operations plus the BOS tag row
  EncLayerP tagger;          // single causal layer (lnh/hist unused)
  LayerNormP tagger_final;
  LinearP tag_proj;  // d x 4, zero-initialized

  Param* w_op = nullptr;  // 4 x d operation embedding, shared by spans and history
  FfnP span_mlp;
  FfnP hist_mlp;
  Param* rel_pos = nullptr;  // (order_n-1) x d relative edit position rows

  LinearP out_proj;  // d x vocab, zero-initialized

  ModelParams(const ModelConfig& cfg, uint64_t seed) : config(cfg) {
    config.validate();
    std::mt19937_64 rng(seed);
    const int d = config.d_model;

    tok_emb = add_init("tok_emb", config.vocab_size, d, rng, d);
    pos_enc = add_init("pos_enc", config.max_len, d, rng, d);
    pos_dec = add_init("pos_dec", config.max_len, d, rng, d);

    enc.resize(config.enc_layers);
    for (int l = 0; l < config.enc_layers; ++l) {
      std::string p = "enc." + std::to_string(l) + ".";
      enc[l].ln1 = add_ln(p + "ln1");
      enc[l].self_attn = add_attn(p + "self", rng);
      if (config.order_n > 1) {
        enc[l].lnh = add_ln(p + "lnh");
        enc[l].hist_attn = add_attn(p + "hist", rng);
      }
      enc[l].ln2 = add_ln(p + "ln2");
      enc[l].ffn = add_ffn(p + "ffn", rng);
    }
    enc_final = add_ln("enc.final_ln");

    dec.resize(config.dec_layers);
    for (int l = 0; l < config.dec_layers; ++l) {
      std::string p = "dec." + std::to_string(l) + ".";
      dec[l].ln1 = add_ln(p + "ln1");
      dec[l].self_attn = add_attn(p + "self", rng);
      dec[l].ln2 = add_ln(p + "ln2");
      dec[l].cross_attn = add_attn(p + "cross", rng);
      dec[l].ln3 = add_ln(p + "ln3");
      dec[l].ffn = add_ffn(p + "ffn", rng);
    }
    dec_final = add_ln("dec.final_ln");

    tag_emb = add_init("tagger.tag_emb", kNumOps + 1, d, rng, d);
    tagger.ln1 = add_ln("tagger.ln1");
    tagger.self_attn = add_attn("tagger.self", rng);
    tagger.ln2 = add_ln("tagger.ln2");
    tagger.ffn = add_ffn("tagger.ffn", rng);
    tagger_final = add_ln("tagger.final_ln");
    tag_proj.w = add_zero("tagger.proj.w", d, kNumOps);
    tag_proj.b = add_zero("tagger.proj.b", 1, kNumOps);

    w_op = add_init("w_op", kNumOps, d, rng, d);
    span_mlp = add_ffn("span_mlp", rng, d);
    hist_mlp = add_ffn("hist_mlp", rng, d);
    if (config.order_n > 1) rel_pos = add_init("rel_pos", config.order_n - 1, d, rng, d);

    out_proj.w = add_zero("out_proj.w", d, config.vocab_size);
    out_proj.b = add_zero("out_proj.b", 1, config.vocab_size);
  }

  ModelParams(const ModelParams&) = delete;
  ModelParams& operator=(const ModelParams&) = delete;

  std::vector<Param*> all() const {
    std::vector<Param*> out;
    out.reserve(store_.size());
    for (const auto& p : store_) out.push_back(p.get());
    return out;
  }

  Param* find(const std::string& name) const {
    for (const auto& p : store_)
      if (p->name == name) return p.get();
    return nullptr;
  }

  void zero_grads() {
    for (const auto& p : store_) p->zero_grad();
  }

  bool all_finite() const {
    for (const auto& p : store_)
      if (!p->value.allFinite()) return false;
    return true;
  }

  int64_t parameter_count() const {
    int64_t n = 0;
    for (const auto& p : store_) n += p->size();
    return n;
  }

  // Copies values from another instance; shapes must match name for name.
  void copy_values_from(const ModelParams& other) {
    for (const auto& p : store_) {
      Param* q = other.find(p->name);
      require(q && q->value.rows() == p->value.rows() && q->value.cols() == p->value.cols(),
              "copy_values_from: shape mismatch for " + p->name);
      p->value = q->value;
    }
  }

 private:
  Param* add_raw(const std::string& name, int rows, int cols) {
    store_.push_back(std::make_unique<Param>(name, rows, cols));
    return store_.back().get();
  }

  Param* add_init(const std::string& name, int rows, int cols, std::mt19937_64& rng, int fan_in) {
    Param* p = add_raw(name, rows, cols);
    const double bound = std::sqrt(1.0 / fan_in);
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) p->value(r, c) = dist(rng);
    return p;
  }

  Param* add_zero(const std::string& name, int rows, int cols) { return add_raw(name, rows, cols); }

  LayerNormP add_ln(const std::string& prefix) {
    LayerNormP ln;
    ln.gamma = add_raw(prefix + ".g", 1, config.d_model);
    ln.gamma->value.setOnes();
    ln.beta = add_raw(prefix + ".b", 1, config.d_model);
    return ln;
  }

  LinearP add_linear(const std::string& prefix, int in, int out, std::mt19937_64& rng) {
    LinearP lin;
    lin.w = add_init(prefix + ".w", in, out, rng, in);
    lin.b = add_zero(prefix + ".b", 1, out);
    return lin;
  }

  AttentionP add_attn(const std::string& prefix, std::mt19937_64& rng) {
    AttentionP a;
    const int d = config.d_model;
    a.q = add_linear(prefix + ".wq", d, d, rng);
    a.k = add_linear(prefix + ".wk", d, d, rng);
    a.v = add_linear(prefix + ".wv", d, d, rng);
    a.o = add_linear(prefix + ".wo", d, d, rng);
    return a;
  }

  FfnP add_ffn(const std::string& prefix, std::mt19937_64& rng, int hidden = 0) {
    FfnP f;
    const int d = config.d_model;
    if (hidden == 0) hidden = config.ff_dim;
    f.in = add_linear(prefix + ".in", d, hidden, rng);
    f.out = add_linear(prefix + ".out", hidden, d, rng);
    return f;
  }

  std::vector<std::unique_ptr<Param>> store_;
};

// Shared state for one forward construction.
struct FwdCtx {
  Tape& tape;
  ModelParams& params;
  bool training = false;
  std::mt19937_64* rng = nullptr;  // required when training with dropout > 0
};

namespace nn {

inline Var linear(FwdCtx& c, Var x, const LinearP& lin) {
  return c.tape.add_row(c.tape.matmul(x, c.tape.leaf(*lin.w)), c.tape.leaf(*lin.b));
}

inline Var layer_norm(FwdCtx& c, Var x, const LayerNormP& ln) {
  return c.tape.layer_norm(x, c.tape.leaf(*ln.gamma), c.tape.leaf(*ln.beta));
}

inline Var dropout(FwdCtx& c, Var x) {
  const double p = c.params.config.dropout;
  if (!c.training || p <= 0.0) return x;
  require(c.rng != nullptr, "training with dropout requires an RNG");
  const Mat& v = c.tape.val(x);
  Mat mask(v.rows(), v.cols());
  std::bernoulli_distribution keep(1.0 - p);
  const double scale = 1.0 / (1.0 - p);
  for (int r = 0; r < mask.rows(); ++r)
    for (int col = 0; col < mask.cols(); ++col) mask(r, col) = keep(*c.rng) ? scale : 0.0;
  return c.tape.mul_const(x, std::move(mask));
}

// Multi-head attention; queries from `q_in`, keys/values from `kv_in`.
// `mask` is an additive score matrix (rows = query positions) or nullptr.
inline Var attention(FwdCtx& c, Var q_in, Var kv_in, const Mat* mask, const AttentionP& p) {
  Tape& t = c.tape;
  const int d = c.params.config.d_model;
  const int heads = c.params.config.n_heads;
  const int dh = d / heads;
  Var q = linear(c, q_in, p.q);
  Var k = linear(c, kv_in, p.k);
  Var v = linear(c, kv_in, p.v);
  std::vector<Var> ctx;
  ctx.reserve(heads);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  for (int h = 0; h < heads; ++h) {
    Var qh = t.slice_cols(q, h * dh, dh);
    Var kh = t.slice_cols(k, h * dh, dh);
    Var vh = t.slice_cols(v, h * dh, dh);
    Var scores = t.scale(t.matmul_nt(qh, kh), inv_sqrt);
    if (mask) scores = t.add_const(scores, *mask);
    ctx.push_back(t.matmul(t.softmax_rows(scores), vh));
  }
  return dropout(c, linear(c, t.concat_cols(ctx), p.o));
}

inline Var ffn(FwdCtx& c, Var x, const FfnP& f) {
  return dropout(c, linear(c, c.tape.gelu(linear(c, x, f.in)), f.out));
}

inline Mat causal_mask(int n) {
  Mat m = Mat::Zero(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) m(i, j) = -1e9;
  return m;
}

}  // namespace nn

// Contextual encoding of [BOS] + doc (+ [SEP] + condition). Rows 0..|doc|
// align with tag positions. History steps, when present, are cross-attended
// in every layer; with no history those sublayers are skipped entirely, so an
// order-1 forward is identical to a model without the history path.
inline Var encode(FwdCtx& c, const Tokens& doc, const Tokens* condition,
                  const std::vector<Var>& history) {
  Tape& t = c.tape;
  const ModelConfig& cfg = c.params.config;
  require(static_cast<int>(history.size()) <= cfg.order_n - 1,
          "history length exceeds order_n - 1");

  std::vector<int> ids;
  ids.reserve(doc.size() + (condition ? condition->size() + 1 : 0) + 1);
  ids.push_back(Vocabulary::kBos);
  for (TokenId tok : doc) {
    require(tok >= 0 && tok < cfg.vocab_size, "encode: token id out of vocabulary");
    ids.push_back(tok);
  }
  if (condition) {
    ids.push_back(Vocabulary::kSep);
    for (TokenId tok : *condition) ids.push_back(tok);
  }
  const int length = static_cast<int>(ids.size());
  require(length <= cfg.max_len, "encode: input of " + std::to_string(length) +
                                     " tokens exceeds max_len " + std::to_string(cfg.max_len));

  std::vector<int> positions(length);
  for (int i = 0; i < length; ++i) positions[i] = i;
  Var x = t.add(t.gather_rows(*c.params.tok_emb, ids), t.gather_rows(*c.params.pos_enc, positions));
  x = nn::dropout(c, x);

  Var hist;
  if (!history.empty()) hist = history.size() == 1 ? history[0] : t.concat_rows(history);

  for (const EncLayerP& layer : c.params.enc) {
    x = t.add(x, nn::attention(c, nn::layer_norm(c, x, layer.ln1), nn::layer_norm(c, x, layer.ln1),
                               nullptr, layer.self_attn));
    if (hist.valid()) {
      x = t.add(x, nn::attention(c, nn::layer_norm(c, x, layer.lnh), hist, nullptr,
                                 layer.hist_attn));
    }
    x = t.add(x, nn::ffn(c, nn::layer_norm(c, x, layer.ln2), layer.ffn));
  }
  return nn::layer_norm(c, x, c.params.enc_final);
}

// Tagger stack over already-built input rows (encoder states + previous-tag
// embeddings). One causal self-attention layer, then a feed-forward block.
inline Var tagger_stack(FwdCtx& c, Var rows) {
  Tape& t = c.tape;
  const Mat mask = nn::causal_mask(static_cast<int>(t.val(rows).rows()));
  Var x = rows;
  const EncLayerP& layer = c.params.tagger;
  x = t.add(x, nn::attention(c, nn::layer_norm(c, x, layer.ln1), nn::layer_norm(c, x, layer.ln1),
                             &mask, layer.self_attn));
  x = t.add(x, nn::ffn(c, nn::layer_norm(c, x, layer.ln2), layer.ffn));
  x = nn::layer_norm(c, x, c.params.tagger_final);
  return nn::linear(c, x, c.params.tag_proj);
}

// 4-way logits for every tag position given the gold tags shifted right
// (teacher forcing). enc_tags must hold exactly the tag-position rows.
inline Var tag_logits(FwdCtx& c, Var enc_tags, const std::vector<OpTag>& gold_tags) {
  Tape& t = c.tape;
  const int m = static_cast<int>(t.val(enc_tags).rows());
  require(static_cast<int>(gold_tags.size()) == m, "tag_logits: tag/row count mismatch");
  std::vector<int> prev(m);
  prev[0] = kBosTagRow;
  for (int j = 1; j < m; ++j) prev[j] = static_cast<int>(gold_tags[j - 1]);
  Var rows = t.add(enc_tags, t.gather_rows(*c.params.tag_emb, prev));
  return tagger_stack(c, rows);
}

// Incremental form used when sampling: logits for position |prefix| given the
// tags sampled so far.
inline Mat tag_logits_prefix(FwdCtx& c, Var enc_tags, const std::vector<OpTag>& prefix) {
  Tape& t = c.tape;
  const int j = static_cast<int>(prefix.size());
  require(j < t.val(enc_tags).rows(), "tag_logits_prefix: position out of range");
  std::vector<int> prev(j + 1);
  prev[0] = kBosTagRow;
  for (int i = 1; i <= j; ++i) prev[i] = static_cast<int>(prefix[i - 1]);
  Var rows = t.add(t.slice_rows(enc_tags, 0, j + 1), t.gather_rows(*c.params.tag_emb, prev));
  Var logits = tagger_stack(c, rows);
  return t.val(logits).row(j);
}

// Pooled span representation: mean of encoder rows over [s_start, s_end),
// shifted by the operation embedding and passed through the span MLP.
inline Var span_representation(FwdCtx& c, Var enc_out, const EditSpan& span) {
  Tape& t = c.tape;
  require(span.s_end > span.s_start, "span_representation: empty span");
  require(span.s_end <= t.val(enc_out).rows(), "span_representation: span out of range");
  Var pooled = t.mean_rows(t.slice_rows(enc_out, span.s_start, span.s_end - span.s_start));
  Var op_row = t.gather_rows(*c.params.w_op, {static_cast<int>(span.s_type)});
  Var x = t.add(op_row, pooled);
  return nn::linear(c, t.gelu(nn::linear(c, x, c.params.span_mlp.in)), c.params.span_mlp.out);
}

// One generation target: the span representation that seeds the decoder and
// the tokens to produce (without the implicit trailing EOS).
struct SpanTarget {
  Var seed;
  Tokens content;
};

struct DecodeOut {
  Var states;                    // concatenated decoder states, pre-projection
  Var logits;                    // rows x vocab
  Var logp;                      // log-softmax of logits
  Var nll;                       // scalar; -sum log p(token) incl. EOS per span
  int token_count = 0;           // number of scored tokens (incl. EOS per span)
  std::vector<int> row_offsets;  // start row of each span's block
  std::vector<int> row_counts;
  std::vector<int> targets;      // flattened target ids, aligned with rows
};

// Causal decoder over one or more spans. All spans decode in one pass with a
// block-diagonal causal mask, which makes them conditionally independent
// given the encoder states; per-span positional embeddings restart at zero.
inline DecodeOut decode_spans(FwdCtx& c, Var enc_out, const std::vector<SpanTarget>& spans) {
  Tape& t = c.tape;
  const ModelConfig& cfg = c.params.config;
  require(!spans.empty(), "decode_spans: no spans");

  DecodeOut out;
  std::vector<Var> row_parts;
  std::vector<int> positions;
  int total = 0;
  for (const SpanTarget& s : spans) {
    const int rows = static_cast<int>(s.content.size()) + 1;
    require(rows <= cfg.max_len, "decode_spans: span content exceeds max_len");
    out.row_offsets.push_back(total);
    out.row_counts.push_back(rows);
    row_parts.push_back(s.seed);
    if (!s.content.empty()) {
      std::vector<int> ids(s.content.begin(), s.content.end());
      row_parts.push_back(t.gather_rows(*c.params.tok_emb, ids));
    }
    for (int p = 0; p < rows; ++p) positions.push_back(p);
    for (TokenId tok : s.content) out.targets.push_back(tok);
    out.targets.push_back(Vocabulary::kEos);
    total += rows;
  }
  out.token_count = total;

  Mat mask = Mat::Constant(total, total, -1e9);
  for (size_t s = 0; s < spans.size(); ++s) {
    const int off = out.row_offsets[s], n = out.row_counts[s];
    for (int i = 0; i < n; ++i)
      for (int j = 0; j <= i; ++j) mask(off + i, off + j) = 0.0;
  }

  Var x = t.add(t.concat_rows(row_parts), t.gather_rows(*c.params.pos_dec, positions));
  x = nn::dropout(c, x);
  for (const DecLayerP& layer : c.params.dec) {
    x = t.add(x, nn::attention(c, nn::layer_norm(c, x, layer.ln1), nn::layer_norm(c, x, layer.ln1),
                               &mask, layer.self_attn));
    x = t.add(x, nn::attention(c, nn::layer_norm(c, x, layer.ln2), enc_out, nullptr,
                               layer.cross_attn));
    x = t.add(x, nn::ffn(c, nn::layer_norm(c, x, layer.ln3), layer.ffn));
  }
  out.states = nn::layer_norm(c, x, c.params.dec_final);
  out.logits = nn::linear(c, out.states, c.params.out_proj);
  out.logp = t.log_softmax_rows(out.logits);
  out.nll = t.pick_nll(out.logp, out.targets);
  return out;
}

// Prefix decode for sampling: returns the logits row for the next token of a
// single span given the tokens emitted so far.
inline Mat decode_prefix_logits(FwdCtx& c, Var enc_out, Var seed, const Tokens& so_far) {
  Tape& t = c.tape;
  const int rows = static_cast<int>(so_far.size()) + 1;
  std::vector<Var> parts = {seed};
  if (!so_far.empty()) parts.push_back(t.gather_rows(*c.params.tok_emb,
                                                     std::vector<int>(so_far.begin(), so_far.end())));
  std::vector<int> positions(rows);
  for (int i = 0; i < rows; ++i) positions[i] = i;
  Var x = t.add(t.concat_rows(parts), t.gather_rows(*c.params.pos_dec, positions));
  const Mat mask = nn::causal_mask(rows);
  for (const DecLayerP& layer : c.params.dec) {
    x = t.add(x, nn::attention(c, nn::layer_norm(c, x, layer.ln1), nn::layer_norm(c, x, layer.ln1),
                               &mask, layer.self_attn));
    x = t.add(x, nn::attention(c, nn::layer_norm(c, x, layer.ln2), enc_out, nullptr,
                               layer.cross_attn));
    x = t.add(x, nn::ffn(c, nn::layer_norm(c, x, layer.ln3), layer.ffn));
  }
  Var logits = nn::linear(c, nn::layer_norm(c, x, c.params.dec_final), c.params.out_proj);
  return t.val(logits).row(rows - 1);
}

// Spans that entail generation, paired with their gold content.
inline std::vector<EditSpan> generation_spans(const EditScript& script) {
  std::vector<EditSpan> out;
  for (EditSpan& s : extract_spans(script))
    if (s.s_type == OpTag::INSERT || s.s_type == OpTag::REPLACE) out.push_back(std::move(s));
  return out;
}

// Edit-compressed representation of one past step: per span, the hist MLP of
// pooled pre-edit encoder states + pooled post-edit decoder states + the
// operation embedding, then the relative-position row for `age` added on.
// KEEP/DELETE spans have no decoder states and contribute a zero vector for
// that term. The pass is history-free: compression of step j never recurses
// into steps before j.
inline Var compress_history(FwdCtx& c, const Tokens& pre_tokens, const EditScript& script,
                            int age) {
  Tape& t = c.tape;
  const ModelConfig& cfg = c.params.config;
  require(age >= 1 && age <= cfg.order_n - 1,
          "compress_history: age " + std::to_string(age) + " out of range for order " +
              std::to_string(cfg.order_n));

  Var enc_prev = encode(c, pre_tokens, nullptr, {});
  std::vector<EditSpan> spans = extract_spans(script);
  if (static_cast<int>(spans.size()) > cfg.max_history_spans)
    spans.resize(cfg.max_history_spans);

  // Decode the generated spans (teacher-forced on their content) to obtain
  // post-edit states.
  std::vector<SpanTarget> gen;
  std::vector<int> gen_index(spans.size(), -1);
  for (size_t i = 0; i < spans.size(); ++i) {
    if (spans[i].s_type == OpTag::INSERT || spans[i].s_type == OpTag::REPLACE) {
      gen_index[i] = static_cast<int>(gen.size());
      gen.push_back({span_representation(c, enc_prev, spans[i]), spans[i].content});
    }
  }
  DecodeOut dec;
  if (!gen.empty()) dec = decode_spans(c, enc_prev, gen);

  std::vector<Var> rows;
  rows.reserve(spans.size());
  for (size_t i = 0; i < spans.size(); ++i) {
    const EditSpan& s = spans[i];
    Var pooled_enc =
        t.mean_rows(t.slice_rows(enc_prev, s.s_start, s.s_end - s.s_start));
    Var op_row = t.gather_rows(*c.params.w_op, {static_cast<int>(s.s_type)});
    Var combined = t.add(pooled_enc, op_row);
    if (gen_index[i] >= 0) {
      const int gi = gen_index[i];
      Var pooled_dec =
          t.mean_rows(t.slice_rows(dec.states, dec.row_offsets[gi], dec.row_counts[gi]));
      combined = t.add(combined, pooled_dec);
    }
    rows.push_back(nn::linear(c, t.gelu(nn::linear(c, combined, c.params.hist_mlp.in)),
                              c.params.hist_mlp.out));
  }
  Var stacked = rows.size() == 1 ? rows[0] : t.concat_rows(rows);
  Var rel = t.gather_rows(*c.params.rel_pos, {age - 1});
  return t.add_row(stacked, rel);
}

// One training/evaluation step: current document, gold script, optional
// conditioning text, and the previous steps available for history (most
// recent first; entry k has age k+1).
struct StepBatch {
  const Tokens* current = nullptr;
  const EditScript* gold = nullptr;
  const Tokens* condition = nullptr;
  struct HistoryStep {
    const Tokens* pre = nullptr;
    const EditScript* script = nullptr;
  };
  std::vector<HistoryStep> history;
};

struct StepLoss {
  Var nll_e;      // -log p(e)
  Var nll_x;      // -log p(x|e)
  Var nll_total;  // sum of the two, by construction
  int e_count = 0;
  int x_count = 0;
  // Snapshots for metrics (values only, no graph).
  Mat tag_logp;                // M x 4
  std::vector<int> tag_gold;   // M
  Mat span_logp;               // scored generation rows x vocab (may be empty)
  std::vector<int> span_gold;  // aligned target ids
};

inline StepLoss step_loss(FwdCtx& c, const StepBatch& batch) {
  Tape& t = c.tape;
  require(batch.current && batch.gold, "step_loss: incomplete batch");
  const int m = static_cast<int>(batch.gold->tags.size());
  require(m == static_cast<int>(batch.current->size()) + 1,
          "step_loss: script does not match document length");
  require(static_cast<int>(batch.history.size()) <= c.params.config.order_n - 1,
          "step_loss: more history steps than order_n - 1");

  std::vector<Var> history;
  history.reserve(batch.history.size());
  for (size_t k = 0; k < batch.history.size(); ++k) {
    const auto& h = batch.history[k];
    history.push_back(compress_history(c, *h.pre, *h.script, static_cast<int>(k) + 1));
  }

  Var enc = encode(c, *batch.current, batch.condition, history);
  Var enc_tags = t.slice_rows(enc, 0, m);

  StepLoss out;
  Var logits = tag_logits(c, enc_tags, batch.gold->tags);
  Var logp = t.log_softmax_rows(logits);
  out.tag_gold.resize(m);
  for (int j = 0; j < m; ++j) out.tag_gold[j] = static_cast<int>(batch.gold->tags[j]);
  out.nll_e = t.pick_nll(logp, out.tag_gold);
  out.e_count = m;
  out.tag_logp = t.val(logp);

  std::vector<SpanTarget> gen;
  for (const EditSpan& s : generation_spans(*batch.gold))
    gen.push_back({span_representation(c, enc, s), s.content});
  if (!gen.empty()) {
    DecodeOut dec = decode_spans(c, enc, gen);
    out.nll_x = dec.nll;
    out.x_count = dec.token_count;
    out.span_logp = t.val(dec.logp);
    out.span_gold = dec.targets;
  } else {
    out.nll_x = t.zero_scalar();
    out.x_count = 0;
  }
  out.nll_total = t.sum({out.nll_e, out.nll_x});
  return out;
}

// Seq2seq preset: ignore the script, decode the whole next revision as one
// span seeded by the BOS embedding. Scores count into |x| only.
inline StepLoss step_loss_seq2seq(FwdCtx& c, const StepBatch& batch) {
  Tape& t = c.tape;
  require(batch.current && batch.gold, "step_loss: incomplete batch");
  Tokens target = apply_script(*batch.current, *batch.gold);
  Var enc = encode(c, *batch.current, batch.condition, {});
  Var seed = t.gather_rows(*c.params.tok_emb, {Vocabulary::kBos});
  DecodeOut dec = decode_spans(c, enc, {{seed, target}});
  StepLoss out;
  out.nll_e = t.zero_scalar();
  out.nll_x = dec.nll;
  out.nll_total = dec.nll;
  out.e_count = 0;
  out.x_count = dec.token_count;
  out.span_logp = t.val(dec.logp);
  out.span_gold = dec.targets;
  return out;
}

inline StepLoss step_loss_dispatch(FwdCtx& c, const StepBatch& batch) {
  return c.params.config.mode == ModelConfig::Mode::seq2seq ? step_loss_seq2seq(c, batch)
                                                            : step_loss(c, batch);
}

}  // namespace editproc
