#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "prunevc/errors.hpp"

namespace prunevc {

// One input of a layer. Empty producer means a graph-external input
// (frame, reference, or latent); `scale` is its spatial resolution
// relative to the base input resolution and is ignored for producers.
struct SourceRef {
  std::string producer;
  std::int64_t channels = 0;
  double scale = 1.0;
};

struct LayerSpec {
  std::string id;
  enum class Kind { conv, tconv } kind = Kind::conv;
  std::int64_t in_ch = 0;
  std::int64_t out_ch = 0;
  int k = 3;
  int stride = 1;
  int pad = 1;
  bool has_bias = true;
  bool prunable = false;  // output filters carry a learnable threshold
  bool decoder = false;   // counted in decoder-side complexity scope
  std::vector<SourceRef> sources;
};

// Layers listed in execution order: producers precede consumers.
using Topology = std::vector<LayerSpec>;

inline const LayerSpec& find_layer(const Topology& topo,
                                   const std::string& id) {
  for (const auto& l : topo)
    if (l.id == id) return l;
  throw ConfigError("topology: no layer named '" + id + "'");
}

inline void validate_topology(const Topology& topo) {
  std::map<std::string, const LayerSpec*> seen;
  for (const auto& l : topo) {
    if (l.id.empty()) throw ConfigError("topology: empty layer id");
    if (seen.count(l.id))
      throw ConfigError("topology: duplicate layer id '" + l.id + "'");
    if (l.out_ch < 1 || l.in_ch < 1)
      throw ConfigError("topology: layer '" + l.id + "' has empty channels");
    std::int64_t src_ch = 0;
    for (const auto& s : l.sources) {
      if (!s.producer.empty()) {
        auto it = seen.find(s.producer);
        if (it == seen.end())
          throw ConfigError("topology: layer '" + l.id +
                            "' consumes unknown or later layer '" + s.producer +
                            "'");
        if (it->second->out_ch != s.channels)
          throw ConfigError("topology: layer '" + l.id + "' expects " +
                            std::to_string(s.channels) + " channels from '" +
                            s.producer + "' which produces " +
                            std::to_string(it->second->out_ch));
      } else if (s.channels < 1) {
        throw ConfigError("topology: layer '" + l.id +
                          "' has an empty external source");
      }
      src_ch += s.channels;
    }
    if (src_ch != l.in_ch)
      throw ConfigError("topology: layer '" + l.id + "' declares " +
                        std::to_string(l.in_ch) + " input channels but its "
                        "sources provide " + std::to_string(src_ch));
    seen[l.id] = &l;
  }
}

}  // namespace prunevc
