#pragma once

// Two-level set-prediction transformer.
//
//   raster -> patch tokens -> encoder -> F_vis
//   [K panel queries | pose query] --(self-attn, cross-attn F_vis, MLP)--> F_P, pose token
//   edge query (k, e) + F_P[k] -> fuse MLP --(self-attn, cross-attn F_vis, MLP)--> F_E
//
// Heads: F_P -> rotation (unit quaternion), translation; pose token -> theta;
// F_E -> edge parameters, stitch tags, free-edge logit. All blocks are
// pre-layernorm with residual connections.

#include <cmath>
#include <cstdint>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sewkit/autodiff.hpp"
#include "sewkit/checkpoint.hpp"
#include "sewkit/errors.hpp"
#include "sewkit/geometry.hpp"
#include "sewkit/io.hpp"
#include "sewkit/pattern.hpp"
#include "sewkit/pose.hpp"
#include "sewkit/stitcher.hpp"

namespace sewkit {

struct ModelConfig {
  int d_model = 64;
  int heads = 4;
  int enc_layers = 2;
  int panel_dec_layers = 2;
  int edge_dec_layers = 2;
  int num_classes = kDefaultClasses;  // K panel slots
  int max_edges = kDefaultMaxEdges;
  int patch = 8;
  int channels = kDefaultClasses;
  int height = 64;
  int width = 64;
  int d_tag = 8;
  int mlp_ratio = 4;
  int pose_dim = kPoseDim;

  int tokens() const { return (height / patch) * (width / patch); }
  int patch_dim() const { return channels * patch * patch; }
  int edge_slots() const { return num_classes * max_edges; }

  void check() const {
    auto positive = [](int v, const char* name) {
      if (v <= 0) throw ConfigError(std::string("model.") + name + " must be positive");
    };
    positive(d_model, "d_model");
    positive(heads, "heads");
    positive(num_classes, "num_classes");
    positive(max_edges, "max_edges");
    positive(patch, "patch");
    positive(channels, "channels");
    positive(height, "height");
    positive(width, "width");
    positive(d_tag, "d_tag");
    positive(mlp_ratio, "mlp_ratio");
    positive(pose_dim, "pose_dim");
    if (enc_layers < 0 || panel_dec_layers < 0 || edge_dec_layers < 0) throw ConfigError("model layer counts must be nonnegative");
    if (d_model % heads != 0) throw ConfigError("model.d_model must be divisible by model.heads");
    if (height % patch != 0 || width % patch != 0) throw ConfigError("model.height and model.width must be divisible by model.patch");
  }

  bool operator==(const ModelConfig&) const = default;
};

namespace detail {

template <class F>
void for_each_field(ModelConfig& c, F&& f) {
  f("d_model", c.d_model);
  f("heads", c.heads);
  f("enc_layers", c.enc_layers);
  f("panel_dec_layers", c.panel_dec_layers);
  f("edge_dec_layers", c.edge_dec_layers);
  f("num_classes", c.num_classes);
  f("max_edges", c.max_edges);
  f("patch", c.patch);
  f("channels", c.channels);
  f("height", c.height);
  f("width", c.width);
  f("d_tag", c.d_tag);
  f("mlp_ratio", c.mlp_ratio);
  f("pose_dim", c.pose_dim);
}

}  // namespace detail

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json::object();
  ModelConfig copy = c;
  detail::for_each_field(copy, [&](const char* key, int& v) { j[key] = v; });
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  if (!j.is_object()) throw ConfigError("model config must be an object");
  std::set<std::string> known;
  detail::for_each_field(c, [&](const char* key, int& v) {
    known.insert(key);
    if (!j.contains(key)) return;
    if (!j[key].is_number_integer()) throw ConfigError(std::string("model.") + key + " must be an integer");
    v = j[key].get<int>();
  });
  for (const auto& [key, value] : j.items())
    if (!known.count(key)) throw ConfigError("unknown model config key '" + key + "'");
}

/// Small configuration used for gradient checks and quick tests.
inline ModelConfig toy_config() {
  ModelConfig c;
  c.d_model = 16;
  c.heads = 2;
  c.enc_layers = 1;
  c.panel_dec_layers = 1;
  c.edge_dec_layers = 1;
  c.num_classes = 4;
  c.max_edges = 4;
  c.patch = 4;
  c.channels = 4;
  c.height = 16;
  c.width = 16;
  c.d_tag = 4;
  c.mlp_ratio = 2;
  c.pose_dim = kPoseDim;
  return c;
}

namespace nn {

struct Linear {
  std::size_t w = 0, b = 0;
};
struct Norm {
  std::size_t gain = 0, bias = 0;
};
struct Attention {
  Linear q, k, v, o;
};
struct Mlp {
  Linear fc1, fc2;
};
struct EncoderLayer {
  Norm ln1, ln2;
  Attention self_attn;
  Mlp mlp;
};
struct DecoderLayer {
  Norm ln1, ln2, ln3;
  Attention self_attn, cross_attn;
  Mlp mlp;
};

struct Layout {
  Linear patch_embed;
  std::size_t pos_embed = 0;
  std::vector<EncoderLayer> encoder;
  Norm enc_norm;
  std::size_t panel_queries = 0, pose_query = 0;
  std::vector<DecoderLayer> panel_decoder;
  Norm panel_norm;
  Mlp rot_head, trans_head, pose_head;
  std::size_t edge_queries = 0;
  Mlp fuse;
  std::vector<DecoderLayer> edge_decoder;
  Norm edge_norm;
  Mlp edge_head, tag_head, free_head;
};

/// Registers every parameter in a fixed order and draws initial values
/// (normal std 0.02 for weights and queries, zero biases, unit norm gains).
template <std::floating_point T>
class Builder {
 public:
  Builder(ParamStore<T>& store, std::uint64_t seed) : store_(store), rng_(seed) {}

  std::size_t normal(const std::string& name, ad::Shape shape, ParamGroup g, bool decay) {
    auto& a = store_.add(name, std::move(shape), g, decay);
    for (auto& v : a.data) v = static_cast<T>(0.02 * rng_.normal());
    return store_.size() - 1;
  }
  std::size_t filled(const std::string& name, ad::Shape shape, ParamGroup g, T value) {
    auto& a = store_.add(name, std::move(shape), g, false);
    for (auto& v : a.data) v = value;
    return store_.size() - 1;
  }
  Linear linear(const std::string& name, int in, int out, ParamGroup g = ParamGroup::transformer) {
    Linear l;
    l.w = normal(name + ".w", {static_cast<std::size_t>(in), static_cast<std::size_t>(out)}, g, true);
    l.b = filled(name + ".b", {static_cast<std::size_t>(out)}, g, T(0));
    return l;
  }
  Norm norm(const std::string& name, int d) {
    return {filled(name + ".gain", {static_cast<std::size_t>(d)}, ParamGroup::transformer, T(1)),
            filled(name + ".bias", {static_cast<std::size_t>(d)}, ParamGroup::transformer, T(0))};
  }
  Attention attention(const std::string& name, int d) {
    return {linear(name + ".q", d, d), linear(name + ".k", d, d), linear(name + ".v", d, d), linear(name + ".o", d, d)};
  }
  Mlp mlp(const std::string& name, int in, int hidden, int out) {
    return {linear(name + ".fc1", in, hidden), linear(name + ".fc2", hidden, out)};
  }
  DecoderLayer decoder_layer(const std::string& name, int d, int hidden) {
    DecoderLayer l;
    l.ln1 = norm(name + ".ln1", d);
    l.self_attn = attention(name + ".self_attn", d);
    l.ln2 = norm(name + ".ln2", d);
    l.cross_attn = attention(name + ".cross_attn", d);
    l.ln3 = norm(name + ".ln3", d);
    l.mlp = mlp(name + ".mlp", d, hidden, d);
    return l;
  }

 private:
  ParamStore<T>& store_;
  Rng rng_;
};

template <std::floating_point T>
Layout build_layout(const ModelConfig& c, ParamStore<T>& store, std::uint64_t seed) {
  Builder<T> b(store, seed);
  const int d = c.d_model, hidden = c.d_model * c.mlp_ratio;
  const auto n = [](int v) { return static_cast<std::size_t>(v); };
  Layout L;
  L.patch_embed = b.linear("patch_embed", c.patch_dim(), d, ParamGroup::embed);
  L.pos_embed = b.normal("pos_embed", {n(c.tokens()), n(d)}, ParamGroup::embed, false);
  for (int i = 0; i < c.enc_layers; ++i) {
    const std::string p = "encoder." + std::to_string(i);
    EncoderLayer l;
    l.ln1 = b.norm(p + ".ln1", d);
    l.self_attn = b.attention(p + ".self_attn", d);
    l.ln2 = b.norm(p + ".ln2", d);
    l.mlp = b.mlp(p + ".mlp", d, hidden, d);
    L.encoder.push_back(l);
  }
  L.enc_norm = b.norm("encoder.norm", d);
  L.panel_queries = b.normal("panel_queries", {n(c.num_classes), n(d)}, ParamGroup::transformer, false);
  L.pose_query = b.normal("pose_query", {1, n(d)}, ParamGroup::transformer, false);
  for (int i = 0; i < c.panel_dec_layers; ++i) L.panel_decoder.push_back(b.decoder_layer("panel_decoder." + std::to_string(i), d, hidden));
  L.panel_norm = b.norm("panel_decoder.norm", d);
  L.rot_head = b.mlp("rot_head", d, d, 4);
  L.trans_head = b.mlp("trans_head", d, d, 3);
  L.pose_head = b.mlp("pose_head", d, d, c.pose_dim);
  L.edge_queries = b.normal("edge_queries", {n(c.edge_slots()), n(d)}, ParamGroup::transformer, false);
  L.fuse = b.mlp("fuse", d, hidden, d);
  for (int i = 0; i < c.edge_dec_layers; ++i) L.edge_decoder.push_back(b.decoder_layer("edge_decoder." + std::to_string(i), d, hidden));
  L.edge_norm = b.norm("edge_decoder.norm", d);
  L.edge_head = b.mlp("edge_head", d, d, 4);
  L.tag_head = b.mlp("tag_head", d, d, c.d_tag);
  L.free_head = b.mlp("free_head", d, d, 1);
  return L;
}

}  // namespace nn

template <std::floating_point T>
struct Model {
  ModelConfig config;
  ParamStore<T> params;
  nn::Layout layout;
};

template <std::floating_point T>
Model<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.check();
  Model<T> m;
  m.config = cfg;
  m.layout = nn::build_layout(cfg, m.params, seed);
  return m;
}

template <std::floating_point T>
struct ModelOutput {
  ad::Var<T> edges;        // [K, E, 4]
  ad::Var<T> rot;          // [K, 4], unit rows
  ad::Var<T> trans;        // [K, 3]
  ad::Var<T> tags;         // [K*E, d_tag]
  ad::Var<T> free_logits;  // [K*E]
  ad::Var<T> theta;        // [pose_dim]
};

/// Parameters placed on a tape as leaves, indexed like the ParamStore.
template <std::floating_point T>
struct Bound {
  std::vector<ad::Var<T>> vars;
  const ad::Var<T>& operator[](std::size_t i) const { return vars[i]; }
};

template <std::floating_point T>
Bound<T> bind(ad::Tape<T>& tape, const ParamStore<T>& params, bool requires_grad) {
  Bound<T> b;
  b.vars.reserve(params.size());
  for (const auto& p : params) b.vars.push_back(tape.leaf(p.value, requires_grad));
  return b;
}

/// Rearranges a [C, H, W] raster into [(H/p)*(W/p), C*p*p] patch rows.
template <std::floating_point T>
std::vector<T> patchify(const ModelConfig& c, std::span<const float> raster) {
  const std::size_t C = static_cast<std::size_t>(c.channels), H = static_cast<std::size_t>(c.height),
                    W = static_cast<std::size_t>(c.width), p = static_cast<std::size_t>(c.patch);
  if (raster.size() != C * H * W)
    throw ShapeMismatch("raster has " + std::to_string(raster.size()) + " values, model expects " + std::to_string(C * H * W));
  const std::size_t gw = W / p, dim = C * p * p;
  std::vector<T> out(static_cast<std::size_t>(c.tokens()) * dim);
  for (std::size_t gy = 0; gy < H / p; ++gy)
    for (std::size_t gx = 0; gx < gw; ++gx) {
      T* row = out.data() + (gy * gw + gx) * dim;
      for (std::size_t ch = 0; ch < C; ++ch)
        for (std::size_t y = 0; y < p; ++y)
          for (std::size_t x = 0; x < p; ++x)
            row[(ch * p + y) * p + x] = static_cast<T>(raster[(ch * H + gy * p + y) * W + gx * p + x]);
    }
  return out;
}

namespace nn {

template <std::floating_point T>
ad::Var<T> linear(const Bound<T>& P, const Linear& l, const ad::Var<T>& x) {
  return ad::add(ad::matmul(x, P[l.w]), P[l.b]);
}

template <std::floating_point T>
ad::Var<T> norm(const Bound<T>& P, const Norm& n, const ad::Var<T>& x) {
  return ad::layernorm(x, P[n.gain], P[n.bias]);
}

template <std::floating_point T>
ad::Var<T> mlp(const Bound<T>& P, const Mlp& m, const ad::Var<T>& x) {
  return linear(P, m.fc2, ad::gelu(linear(P, m.fc1, x)));
}

template <std::floating_point T>
ad::Var<T> attention(const Bound<T>& P, const Attention& a, const ad::Var<T>& x, const ad::Var<T>& context, int heads) {
  auto q = linear(P, a.q, x);
  auto k = linear(P, a.k, context);
  auto v = linear(P, a.v, context);
  const std::size_t dh = q.dim(1) / static_cast<std::size_t>(heads);
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  std::vector<ad::Var<T>> outs;
  for (std::size_t h = 0; h < static_cast<std::size_t>(heads); ++h) {
    auto qh = ad::slice(q, 1, h * dh, dh);
    auto kh = ad::slice(k, 1, h * dh, dh);
    auto vh = ad::slice(v, 1, h * dh, dh);
    auto w = ad::softmax(ad::scale(ad::matmul(qh, ad::transpose(kh)), scale));
    outs.push_back(ad::matmul(w, vh));
  }
  return linear(P, a.o, heads == 1 ? outs[0] : ad::concat(outs, 1));
}

template <std::floating_point T>
ad::Var<T> decoder_layer(const Bound<T>& P, const DecoderLayer& l, ad::Var<T> x, const ad::Var<T>& memory, int heads) {
  auto h = norm(P, l.ln1, x);
  x = ad::add(x, attention(P, l.self_attn, h, h, heads));
  x = ad::add(x, attention(P, l.cross_attn, norm(P, l.ln2, x), memory, heads));
  return ad::add(x, mlp(P, l.mlp, norm(P, l.ln3, x)));
}

}  // namespace nn

template <std::floating_point T>
ModelOutput<T> forward(ad::Tape<T>& tape, const Model<T>& m, const Bound<T>& P, std::span<const float> raster) {
  const ModelConfig& c = m.config;
  const nn::Layout& L = m.layout;
  const auto n = [](int v) { return static_cast<std::size_t>(v); };

  auto tokens = tape.constant({n(c.tokens()), n(c.patch_dim())}, patchify<T>(c, raster));
  auto x = ad::add(nn::linear(P, L.patch_embed, tokens), P[L.pos_embed]);
  for (const auto& l : L.encoder) {
    auto h = nn::norm(P, l.ln1, x);
    x = ad::add(x, nn::attention(P, l.self_attn, h, h, c.heads));
    x = ad::add(x, nn::mlp(P, l.mlp, nn::norm(P, l.ln2, x)));
  }
  auto memory = nn::norm(P, L.enc_norm, x);

  auto q = ad::concat<T>({P[L.panel_queries], P[L.pose_query]}, 0);
  for (const auto& l : L.panel_decoder) q = nn::decoder_layer(P, l, q, memory, c.heads);
  q = nn::norm(P, L.panel_norm, q);
  auto panel_tokens = ad::slice(q, 0, 0, n(c.num_classes));
  auto pose_token = ad::slice(q, 0, n(c.num_classes), 1);

  ModelOutput<T> out;
  out.rot = ad::l2_normalize(nn::mlp(P, L.rot_head, panel_tokens));
  out.trans = nn::mlp(P, L.trans_head, panel_tokens);
  out.theta = ad::reshape(nn::mlp(P, L.pose_head, pose_token), {n(c.pose_dim)});

  std::vector<std::size_t> owner(n(c.edge_slots()));
  for (std::size_t i = 0; i < owner.size(); ++i) owner[i] = i / n(c.max_edges);
  auto e = nn::mlp(P, L.fuse, ad::add(P[L.edge_queries], ad::gather_rows(panel_tokens, std::move(owner))));
  for (const auto& l : L.edge_decoder) e = nn::decoder_layer(P, l, e, memory, c.heads);
  e = nn::norm(P, L.edge_norm, e);

  out.edges = ad::reshape(nn::mlp(P, L.edge_head, e), {n(c.num_classes), n(c.max_edges), 4});
  out.tags = nn::mlp(P, L.tag_head, e);
  out.free_logits = ad::reshape(nn::mlp(P, L.free_head, e), {n(c.edge_slots())});
  return out;
}

/// Plain-value copy of a forward pass, detached from any tape.
struct Prediction {
  PatternTensor tensor;
  int d_tag = 0;
  std::vector<double> tags;
  std::vector<double> free_logits;
  PoseVector theta;
};

template <std::floating_point T>
Prediction detach(const ModelConfig& c, const ModelOutput<T>& out) {
  Prediction p;
  p.tensor = PatternTensor(c.num_classes, c.max_edges);
  const auto& e = out.edges.value();
  std::copy(e.begin(), e.end(), p.tensor.edges.begin());
  const auto& r = out.rot.value();
  std::copy(r.begin(), r.end(), p.tensor.rot.begin());
  const auto& t = out.trans.value();
  std::copy(t.begin(), t.end(), p.tensor.trans.begin());
  p.d_tag = c.d_tag;
  p.tags.assign(out.tags.value().begin(), out.tags.value().end());
  p.free_logits.assign(out.free_logits.value().begin(), out.free_logits.value().end());
  const auto& th = out.theta.value();
  for (std::size_t i = 0; i < p.theta.theta.size() && i < th.size(); ++i) p.theta.theta[i] = th[i];
  return p;
}

struct DecodeOptions {
  double eps_edge = kDefaultEpsEdge;
  double stitch_threshold = kDefaultStitchThreshold;
};

/// Prunes short edges and thin panels, then decodes stitches among the
/// surviving edges (an edge is free when its logit is positive).
inline SewingPattern decode_prediction(const Prediction& p, const DecodeOptions& opt = {}) {
  auto pruned = prune_tensor(p.tensor, opt.eps_edge);
  const std::size_t m = pruned.source_rows.size();
  const std::size_t d = static_cast<std::size_t>(p.d_tag);
  std::vector<double> tags(m * d);
  std::vector<std::uint8_t> free(m);
  for (std::size_t i = 0; i < m; ++i) {
    const auto row = static_cast<std::size_t>(pruned.source_rows[i].panel * p.tensor.max_edges + pruned.source_rows[i].edge);
    std::copy_n(p.tags.begin() + static_cast<std::ptrdiff_t>(row * d), d, tags.begin() + static_cast<std::ptrdiff_t>(i * d));
    free[i] = p.free_logits[row] > 0.0;
  }
  auto sim = similarity_matrix(tags, d, pruned.kept_refs);
  pruned.pattern.stitches = greedy_decode(sim, free, opt.stitch_threshold);
  pruned.pattern.canonicalize();
  return pruned.pattern;
}

template <std::floating_point T>
Prediction run_model(const Model<T>& m, std::span<const float> raster) {
  ad::Tape<T> tape;
  auto P = bind(tape, m.params, false);
  return detach(m.config, forward(tape, m, P, raster));
}

template <std::floating_point T>
SewingPattern predict(const Model<T>& m, std::span<const float> raster, const DecodeOptions& opt = {}) {
  return decode_prediction(run_model(m, raster), opt);
}

}  // namespace sewkit
