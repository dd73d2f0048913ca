#include "prunevc/complexity.hpp"

#include <cmath>
#include <utility>

#include "json.hpp"
#include "prunevc/errors.hpp"

namespace prunevc {
namespace {

struct Dims {
  std::int64_t h = 0, w = 0;
};

// input resolution of each layer, resolved through producer outputs and
// external-source scales relative to (base_h, base_w)
std::map<std::string, std::pair<Dims, Dims>> propagate_dims(
    const Topology& topo, std::int64_t base_h, std::int64_t base_w) {
  if (base_h < 1 || base_w < 1)
    throw ShapeError("complexity: base resolution " + std::to_string(base_h) +
                     "x" + std::to_string(base_w) + " is degenerate");
  std::map<std::string, std::pair<Dims, Dims>> dims;  // id -> (in, out)
  for (const auto& l : topo) {
    Dims in{0, 0};
    bool first = true;
    for (const auto& s : l.sources) {
      Dims d;
      if (s.producer.empty()) {
        d.h = std::llround(static_cast<double>(base_h) * s.scale);
        d.w = std::llround(static_cast<double>(base_w) * s.scale);
      } else {
        d = dims.at(s.producer).second;
      }
      if (first) {
        in = d;
        first = false;
      } else if (d.h != in.h || d.w != in.w) {
        throw ShapeError("complexity: layer '" + l.id +
                         "' mixes source resolutions " + std::to_string(in.h) +
                         "x" + std::to_string(in.w) + " and " +
                         std::to_string(d.h) + "x" + std::to_string(d.w));
      }
    }
    if (in.h < 1 || in.w < 1)
      throw ShapeError("complexity: layer '" + l.id + "' sees a " +
                       std::to_string(in.h) + "x" + std::to_string(in.w) +
                       " input at base " + std::to_string(base_h) + "x" +
                       std::to_string(base_w));
    Dims out;
    if (l.kind == LayerSpec::Kind::conv) {
      if ((in.h + 2 * l.pad - l.k) % l.stride != 0 ||
          (in.w + 2 * l.pad - l.k) % l.stride != 0)
        throw ShapeError("complexity: layer '" + l.id + "' geometry (" +
                         std::to_string(in.h) + "x" + std::to_string(in.w) +
                         ", k=" + std::to_string(l.k) + ", s=" +
                         std::to_string(l.stride) + ", p=" +
                         std::to_string(l.pad) + ") does not tile");
      out.h = (in.h + 2 * l.pad - l.k) / l.stride + 1;
      out.w = (in.w + 2 * l.pad - l.k) / l.stride + 1;
    } else {
      out.h = (in.h - 1) * l.stride + l.k - 2 * l.pad;
      out.w = (in.w - 1) * l.stride + l.k - 2 * l.pad;
    }
    if (out.h < 1 || out.w < 1)
      throw ShapeError("complexity: layer '" + l.id + "' produces a " +
                       std::to_string(out.h) + "x" + std::to_string(out.w) +
                       " output");
    dims[l.id] = {in, out};
  }
  return dims;
}

std::int64_t kept_count(const std::map<std::string, std::vector<std::int64_t>>& m,
                        const std::string& id, std::int64_t dense) {
  auto it = m.find(id);
  return it == m.end() ? dense : static_cast<std::int64_t>(it->second.size());
}

}  // namespace

ComplexityReport complexity_report(const Topology& topo,
                                   const CompactionPlan& plan,
                                   std::int64_t base_h, std::int64_t base_w,
                                   bool decoder_only_params,
                                   std::int64_t extra_params) {
  validate_topology(topo);
  auto dims = propagate_dims(topo, base_h, base_w);

  ComplexityReport r;
  for (const auto& l : topo) {
    const std::int64_t kin = kept_count(plan.kept_in, l.id, l.in_ch);
    const std::int64_t kout = kept_count(plan.kept_out, l.id, l.out_ch);
    const auto& [in, out] = dims.at(l.id);
    // transposed convs tap every input site k*k times, so they are
    // counted at input resolution
    const Dims site = l.kind == LayerSpec::Kind::conv ? out : in;
    const std::int64_t kk = static_cast<std::int64_t>(l.k) * l.k;

    LayerComplexity lc;
    lc.id = l.id;
    lc.decoder = l.decoder;
    lc.macs_dense = site.h * site.w * kk * l.in_ch * l.out_ch;
    lc.macs_pruned = site.h * site.w * kk * kin * kout;
    lc.params_dense = l.out_ch * (l.in_ch * kk + (l.has_bias ? 1 : 0));
    lc.params_pruned = kout * (kin * kk + (l.has_bias ? 1 : 0));

    if (l.decoder) {
      r.macs_total += lc.macs_dense;
      r.macs_after += lc.macs_pruned;
    }
    if (l.decoder || !decoder_only_params) {
      r.params_total += lc.params_dense;
      r.params_after += lc.params_pruned;
    }
    r.layers.push_back(std::move(lc));
  }
  r.params_total += extra_params;
  r.params_after += extra_params;
  return r;
}

std::string complexity_json(const ComplexityReport& r) {
  nlohmann::ordered_json j;
  j["params_total"] = r.params_total;
  j["params_after"] = r.params_after;
  j["params_ratio"] =
      r.params_total ? static_cast<double>(r.params_after) / r.params_total
                     : 1.0;
  j["macs_total"] = r.macs_total;
  j["macs_after"] = r.macs_after;
  j["macs_ratio"] =
      r.macs_total ? static_cast<double>(r.macs_after) / r.macs_total : 1.0;
  auto layers = nlohmann::ordered_json::array();
  for (const auto& l : r.layers) {
    nlohmann::ordered_json e;
    e["id"] = l.id;
    e["decoder"] = l.decoder;
    e["macs_dense"] = l.macs_dense;
    e["macs_pruned"] = l.macs_pruned;
    e["params_dense"] = l.params_dense;
    e["params_pruned"] = l.params_pruned;
    layers.push_back(std::move(e));
  }
  j["layers"] = std::move(layers);
  return j.dump(2) + "\n";
}

std::string plan_json(const CompactionPlan& plan) {
  nlohmann::ordered_json j;
  j["order"] = plan.order;
  auto layers = nlohmann::ordered_json::object();
  for (const auto& id : plan.order) {
    nlohmann::ordered_json e;
    e["kept_out"] = plan.kept_out.at(id);
    e["kept_in"] = plan.kept_in.at(id);
    layers[id] = std::move(e);
  }
  j["layers"] = std::move(layers);
  return j.dump(2) + "\n";
}

std::map<std::string, std::vector<char>> model_masks(const CodecModel& m) {
  std::map<std::string, std::vector<char>> masks;
  for (const auto& id : m.prunable_ids()) {
    Tensor norms = row_norms(m.params.at(id + ".w"));
    masks[id] = keep_mask(norms, m.threshold_of(id));
  }
  return masks;
}

CodecModel compact_model(const CodecModel& m, const CompactionPlan& plan) {
  CodecModel out;
  out.input_channels = m.input_channels;
  out.latent_channels = m.latent_channels;
  out.num_downsamples = m.num_downsamples;
  out.shared_threshold = false;

  for (const auto& l : m.topo) {
    const auto& ko = plan.kept_out.at(l.id);
    const auto& ki = plan.kept_in.at(l.id);
    const std::int64_t kk = static_cast<std::int64_t>(l.k) * l.k;

    const Tensor& w = m.params.at(l.id + ".w");
    if (w.shape[0] != l.out_ch || w.shape[1] != l.in_ch * kk)
      throw ShapeError("compact: weight of '" + l.id + "' is " +
                       shape_str(w.shape) + ", topology says " +
                       std::to_string(l.out_ch) + "x" +
                       std::to_string(l.in_ch * kk));
    Tensor wc(Shape{static_cast<std::int64_t>(ko.size()),
                    static_cast<std::int64_t>(ki.size()) * kk});
    auto src = w.mat_view(l.out_ch, l.in_ch * kk);
    auto dst = wc.mat_view(wc.shape[0], wc.shape[1]);
    for (std::size_t r = 0; r < ko.size(); ++r)
      for (std::size_t c = 0; c < ki.size(); ++c)
        dst.block(static_cast<std::int64_t>(r),
                  static_cast<std::int64_t>(c) * kk, 1, kk) =
            src.block(ko[r], ki[c] * kk, 1, kk);
    out.params[l.id + ".w"] = std::move(wc);

    if (l.has_bias) {
      const Tensor& b = m.params.at(l.id + ".b");
      Tensor bc(Shape{static_cast<std::int64_t>(ko.size())});
      for (std::size_t r = 0; r < ko.size(); ++r) bc.data[r] = b.data[ko[r]];
      out.params[l.id + ".b"] = std::move(bc);
    }

    LayerSpec spec = l;
    spec.out_ch = static_cast<std::int64_t>(ko.size());
    spec.in_ch = static_cast<std::int64_t>(ki.size());
    spec.prunable = false;
    for (auto& s : spec.sources)
      if (!s.producer.empty())
        s.channels =
            static_cast<std::int64_t>(plan.kept_out.at(s.producer).size());
    out.topo.push_back(std::move(spec));
  }

  for (const auto& [name, t] : m.params)
    if (name.rfind("entropy.", 0) == 0) out.params[name] = t;

  validate_topology(out.topo);
  return out;
}

}  // namespace prunevc
