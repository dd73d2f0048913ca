#include "prunevc/codec.hpp"

#include <cmath>

#include "prunevc/ops.hpp"
#include "prunevc/pruning.hpp"
#include "prunevc/rng.hpp"

namespace prunevc {

namespace {

constexpr int kCodecKernel = 4;     // stride-2 up/down sampling
constexpr int kHeadKernel = 3;      // stride-1 pixel heads
constexpr float kUnitScaleRaw = 0.54132485f;  // softplus(x) == 1

std::string enc_id(const std::string& branch, int i) {
  return branch + ".enc." + std::to_string(i);
}
std::string dec_id(const std::string& branch, int i) {
  return branch + ".dec." + std::to_string(i);
}

void append_branch(Topology& topo, const CodecConfig& cfg,
                   const std::string& branch, std::int64_t enc_in,
                   bool concat_reference_at_head) {
  const std::int64_t w = cfg.base_width;
  const std::int64_t latent = cfg.latent_channels;
  const std::int64_t c = cfg.input_channels;
  const int d = cfg.num_downsamples;
  const double latent_scale = 1.0 / static_cast<double>(1 << d);

  for (int i = 0; i < d; ++i) {
    LayerSpec l;
    l.id = enc_id(branch, i);
    l.kind = LayerSpec::Kind::conv;
    l.in_ch = (i == 0) ? enc_in : w;
    l.out_ch = (i == d - 1) ? latent : w;
    l.k = kCodecKernel;
    l.stride = 2;
    l.pad = 1;
    l.decoder = false;
    l.prunable = false;
    if (i == 0)
      l.sources = {{"", enc_in, 1.0}};
    else
      l.sources = {{enc_id(branch, i - 1), w, 1.0}};
    topo.push_back(std::move(l));
  }
  for (int i = 0; i < d; ++i) {
    LayerSpec l;
    l.id = dec_id(branch, i);
    l.kind = LayerSpec::Kind::tconv;
    l.in_ch = (i == 0) ? latent : w;
    l.out_ch = w;
    l.k = kCodecKernel;
    l.stride = 2;
    l.pad = 1;
    l.decoder = true;
    l.prunable = true;
    if (i == 0)
      l.sources = {{"", latent, latent_scale}};  // the coded latent
    else
      l.sources = {{dec_id(branch, i - 1), w, 1.0}};
    topo.push_back(std::move(l));
  }
  LayerSpec head;
  head.id = branch + ".out";
  head.kind = LayerSpec::Kind::conv;
  head.in_ch = concat_reference_at_head ? w + c : w;
  head.out_ch = c;
  head.k = kHeadKernel;
  head.stride = 1;
  head.pad = 1;
  head.decoder = true;
  head.prunable = false;  // pixel arity is fixed
  head.sources = {{dec_id(branch, cfg.num_downsamples - 1), w, 1.0}};
  if (concat_reference_at_head) head.sources.push_back({"", c, 1.0});
  topo.push_back(std::move(head));
}

}  // namespace

Topology make_codec_topology(const CodecConfig& cfg) {
  if (cfg.input_channels < 1 || cfg.base_width < 1 ||
      cfg.latent_channels < 1 || cfg.num_downsamples < 1)
    throw ConfigError("codec: degenerate configuration");
  Topology topo;
  append_branch(topo, cfg, "pred", 2 * cfg.input_channels, true);
  append_branch(topo, cfg, "res", cfg.input_channels, false);
  validate_topology(topo);
  return topo;
}

CodecModel CodecModel::init(const CodecConfig& cfg, std::uint64_t seed,
                            bool shared_threshold) {
  CodecModel m;
  m.topo = make_codec_topology(cfg);
  m.input_channels = cfg.input_channels;
  m.latent_channels = cfg.latent_channels;
  m.num_downsamples = cfg.num_downsamples;
  m.shared_threshold = shared_threshold;

  for (const auto& l : m.topo) {
    const std::int64_t fan_in = l.in_ch * l.k * l.k;
    const std::int64_t fan_out = l.out_ch * l.k * l.k;
    const float a = std::sqrt(6.0f / static_cast<float>(fan_in + fan_out));
    Tensor w(Shape{l.out_ch, fan_in});
    RngStream rng(seed, rngstream::init, fnv1a(l.id + ".w"));
    for (std::int64_t i = 0; i < w.numel(); ++i) w.data[i] = rng.uniform(-a, a);
    m.params[l.id + ".w"] = std::move(w);
    if (l.has_bias) m.params[l.id + ".b"] = Tensor::zeros({l.out_ch});
  }
  for (const char* br : {"pred", "res"}) {
    m.params[std::string("entropy.") + br + ".mu"] =
        Tensor::zeros({cfg.latent_channels});
    m.params[std::string("entropy.") + br + ".scale"] =
        Tensor::full({cfg.latent_channels}, kUnitScaleRaw);
  }
  if (shared_threshold) {
    m.params["prune.shared.T"] = Tensor::zeros({1});
  } else {
    for (const auto& l : m.topo)
      if (l.prunable) m.params["prune." + l.id + ".T"] = Tensor::zeros({1});
  }
  return m;
}

CodecModel CodecModel::from_arrays(const CodecConfig& cfg,
                                   const std::map<std::string, Tensor>& arrays,
                                   bool shared_threshold) {
  CodecModel m;
  m.topo = make_codec_topology(cfg);
  m.input_channels = cfg.input_channels;
  m.latent_channels = cfg.latent_channels;
  m.num_downsamples = cfg.num_downsamples;
  m.shared_threshold = shared_threshold;

  // channel counts follow the stored weights (a compacted model is narrower
  // than its configuration)
  std::map<std::string, std::int64_t> out_ch;
  for (auto& l : m.topo) {
    auto it = arrays.find(l.id + ".w");
    if (it == arrays.end())
      throw IoError("checkpoint: missing weight for layer '" + l.id + "'");
    if (it->second.ndim() != 2)
      throw IoError("checkpoint: weight of '" + l.id + "' is not 2-d");
    const std::int64_t rows = it->second.shape[0];
    const std::int64_t cols = it->second.shape[1];
    if (cols % (static_cast<std::int64_t>(l.k) * l.k) != 0)
      throw IoError("checkpoint: weight of '" + l.id +
                    "' does not factor into k*k columns");
    l.out_ch = rows;
    l.in_ch = cols / (l.k * l.k);
    std::int64_t src_total = 0;
    for (auto& s : l.sources) {
      if (!s.producer.empty()) s.channels = out_ch.at(s.producer);
      src_total += s.channels;
    }
    if (src_total != l.in_ch)
      throw IoError("checkpoint: layer '" + l.id + "' weight expects " +
                    std::to_string(l.in_ch) + " input channels, sources give " +
                    std::to_string(src_total));
    out_ch[l.id] = l.out_ch;
    // a model without thresholds is a plain dense model
    const std::string tname = shared_threshold
                                  ? std::string("prune.shared.T")
                                  : "prune." + l.id + ".T";
    if (l.prunable && !arrays.count(tname)) l.prunable = false;
  }
  validate_topology(m.topo);

  for (const auto& l : m.topo) {
    m.params[l.id + ".w"] = arrays.at(l.id + ".w");
    if (l.has_bias) {
      auto it = arrays.find(l.id + ".b");
      if (it == arrays.end())
        throw IoError("checkpoint: missing bias for layer '" + l.id + "'");
      if (it->second.shape != Shape{l.out_ch})
        throw IoError("checkpoint: bias shape mismatch for '" + l.id + "'");
      m.params[l.id + ".b"] = it->second;
    }
  }
  for (const char* br : {"pred", "res"}) {
    for (const char* f : {".mu", ".scale"}) {
      const std::string name = std::string("entropy.") + br + f;
      auto it = arrays.find(name);
      if (it == arrays.end())
        throw IoError("checkpoint: missing '" + name + "'");
      if (it->second.shape != Shape{cfg.latent_channels})
        throw IoError("checkpoint: '" + name + "' shape mismatch");
      m.params[name] = it->second;
    }
  }
  for (const auto& l : m.topo) {
    if (!l.prunable) continue;
    const std::string tname = m.threshold_param(l.id);
    m.params[tname] = arrays.at(tname);
    if (m.params[tname].shape != Shape{1})
      throw IoError("checkpoint: threshold '" + tname + "' is not scalar");
  }
  return m;
}

std::vector<std::string> CodecModel::prunable_ids() const {
  std::vector<std::string> ids;
  for (const auto& l : topo)
    if (l.prunable) ids.push_back(l.id);
  return ids;
}

std::string CodecModel::threshold_param(const std::string& layer_id) const {
  return shared_threshold ? std::string("prune.shared.T")
                          : "prune." + layer_id + ".T";
}

float CodecModel::threshold_of(const std::string& layer_id) const {
  return params.at(threshold_param(layer_id)).data[0];
}

namespace {

struct ForwardCtx {
  const CodecModel& m;
  Tape& tape;
  CodingMode mode;
  const PruneRuntime* prune;
  bool requires_grad;
  std::map<std::string, Value>* leaves_out;
  std::map<std::string, Value> leaf_cache;

  Value leaf(const std::string& name) {
    auto it = leaf_cache.find(name);
    if (it != leaf_cache.end()) return it->second;
    Value v = tape.leaf(m.params.at(name), requires_grad);
    leaf_cache.emplace(name, v);
    if (leaves_out) leaves_out->emplace(name, v);
    return v;
  }

  // layer application with optional filter masking
  Value apply(const LayerSpec& l, Value x) {
    Value w = leaf(l.id + ".w");
    Value b = leaf(l.id + ".b");
    if (l.prunable && prune) {
      const auto& keep = prune->keep.at(l.id);
      w = masked_rows(w, keep, prune->beta);
      b = masked_rows(b, keep, prune->beta);
    }
    return l.kind == LayerSpec::Kind::conv
               ? conv2d(x, w, b, l.k, l.stride, l.pad)
               : tconv2d(x, w, b, l.k, l.stride, l.pad);
  }
};

struct BranchOut {
  Value recon;   // pixel-space output of the branch head
  Value rate;    // latent bits
  Value latent;  // coded symbols
  std::map<std::string, Value> hidden;
};

BranchOut run_branch(ForwardCtx& ctx, const std::string& branch, Value input,
                     Value reference, bool concat_reference_at_head,
                     std::uint64_t noise_seed, std::uint64_t noise_counter) {
  const int d = ctx.m.num_downsamples;
  Value h = input;
  for (int i = 0; i < d; ++i) {
    const LayerSpec& l = find_layer(ctx.m.topo, enc_id(branch, i));
    h = ctx.apply(l, h);
    if (i < d - 1) h = leaky_relu(h);  // latent stays linear
  }
  Value y = quantize(h, ctx.mode, noise_seed, noise_counter);
  Value rate = rate_estimate(y, ctx.leaf("entropy." + branch + ".mu"),
                             ctx.leaf("entropy." + branch + ".scale"));
  BranchOut out;
  out.rate = rate;
  out.latent = y;
  Value g = y;
  for (int i = 0; i < d; ++i) {
    const LayerSpec& l = find_layer(ctx.m.topo, dec_id(branch, i));
    g = leaky_relu(ctx.apply(l, g));
    out.hidden.emplace(l.id, g);
  }
  const LayerSpec& head = find_layer(ctx.m.topo, branch + ".out");
  Value head_in = concat_reference_at_head ? concat_channels(g, reference) : g;
  out.recon = ctx.apply(head, head_in);
  return out;
}

}  // namespace

ForwardResult CodecModel::code_frame(Tape& tape, const Tensor& x,
                                     const Tensor& xref, CodingMode mode,
                                     std::uint64_t noise_seed,
                                     std::uint64_t noise_counter_base,
                                     const PruneRuntime* prune,
                                     bool requires_grad,
                                     std::map<std::string, Value>* leaves_out)
    const {
  if (x.ndim() != 4 || !x.same_shape(xref))
    throw ShapeError("code_frame: frames must be equal NCHW, got " +
                     shape_str(x.shape) + " and " + shape_str(xref.shape));
  if (x.shape[1] != input_channels)
    throw ShapeError("code_frame: expected " +
                     std::to_string(input_channels) + " channels, got " +
                     std::to_string(x.shape[1]));
  const std::int64_t div = std::int64_t(1) << num_downsamples;
  if (x.shape[2] % div != 0 || x.shape[3] % div != 0)
    throw ShapeError("code_frame: spatial dims " + std::to_string(x.shape[2]) +
                     "x" + std::to_string(x.shape[3]) +
                     " are not divisible by " + std::to_string(div));

  ForwardCtx ctx{*this, tape, mode, prune, requires_grad, leaves_out, {}};
  Value cx = tape.constant(x);
  Value cref = tape.constant(xref);

  BranchOut pred = run_branch(ctx, "pred", concat_channels(cx, cref), cref,
                              true, noise_seed, noise_counter_base);
  Value residual = sub(cx, pred.recon);
  BranchOut res = run_branch(ctx, "res", residual, cref, false, noise_seed,
                             noise_counter_base + 1);

  ForwardResult out;
  out.xhat = add(pred.recon, res.recon);
  if (mode == CodingMode::eval) out.xhat = clamp01(out.xhat);
  out.rate_pred = pred.rate;
  out.rate_res = res.rate;
  out.latent_pred = pred.latent;
  out.latent_res = res.latent;
  out.mse = mean(square(sub(out.xhat, cx)));
  out.hidden = std::move(pred.hidden);
  for (auto& kv : res.hidden) out.hidden.emplace(kv.first, kv.second);
  return out;
}

}  // namespace prunevc
