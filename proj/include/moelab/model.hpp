// SPDX-License-Identifier: Apache-2.0
//
// Toy MoE transformer: embedding, blocks of (optional causal single-head
// attention + residual + layer norm, then a top-k routed expert sublayer +
// residual + layer norm), and an unembedding projection. Parameters are
// organized into named groups (router / backbone / expert) so the trainer
// can mask updates per group.
#pragma once

#include <array>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "moelab/adaptive_router.hpp"
#include "moelab/batch.hpp"
#include "moelab/random.hpp"
#include "moelab/tensor.hpp"

namespace moelab {

inline constexpr double kInitStd = 0.08;

struct ModelConfig {
  int vocab_size = 24;
  int model_dim = 16;
  int num_layers = 2;
  int experts_per_layer = 8;
  int top_k = 2;
  bool shared_expert = false;
  int expert_hidden_dim = 32;
  bool attention = true;
  Precision precision = Precision::F32;

  void validate() const {
    if (vocab_size < 2 || model_dim < 1 || num_layers < 1 || expert_hidden_dim < 1)
      throw ConfigError("model dimensions must be positive");
    if (top_k < 1 || top_k > experts_per_layer)
      throw ConfigError("top_k must lie in [1, experts_per_layer]");
  }

  int sep_token() const { return vocab_size - 1; }
};

template <class S>
struct ExpertFfn {
  Tensor<S> w1, b1, w2, b2;
};

template <class S>
struct MoELayer {
  Tensor<S> router_w;  // [d x E] (+1 column for the shared expert gate)
  Tensor<S> router_b;
  std::vector<ExpertFfn<S>> experts;  // routed experts
  std::optional<ExpertFfn<S>> shared;
  std::optional<AdaptiveRouter<S>> adaptive;
  // per routed expert: domain ids the expert is NOT routable for while
  // training (populated by duplication)
  std::vector<std::vector<int>> excluded_domains;

  int num_experts() const { return static_cast<int>(experts.size()); }
  // router logit columns: routed experts plus one gate column for the
  // shared expert when enabled
  int router_cols() const { return num_experts() + (shared ? 1 : 0); }
};

template <class S>
struct Block {
  bool has_attention = true;
  Tensor<S> wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor<S> ln1_g, ln1_b;
  Tensor<S> ln2_g, ln2_b;
  MoELayer<S> moe;
};

enum class GroupKind { Router, Backbone, Expert, SharedExpert };

template <class S>
struct ParamGroup {
  std::string name;
  GroupKind kind = GroupKind::Backbone;
  int layer = -1;
  int expert = -1;
  std::vector<Tensor<S>> tensors;

  long long num_params() const {
    long long n = 0;
    for (const auto& t : tensors) n += t.size();
    return n;
  }
};

// Availability/update permission per layer: mask[d][e] == 1 means domain d
// may update routed expert e.
using DomainExpertMask = std::vector<std::vector<uint8_t>>;

struct ForwardOptions {
  bool use_adaptive = false;
  bool training = false;  // duplication availability gating applies only here
  const std::vector<int>* token_domains = nullptr;
  // structural gradient filter: when set, expert contributions from domain d
  // run against detached weights unless (*update_gate)[layer][d][e] == 1
  const std::vector<DomainExpertMask>* update_gate = nullptr;
};

template <class S>
struct LayerRecord {
  Tensor<S> router_input;
  Tensor<S> probs;
  std::vector<std::vector<int>> selected;  // per token, rank order
};

template <class S>
struct ForwardResult {
  Tensor<S> logits;
  std::vector<LayerRecord<S>> layers;
};

template <class S>
struct RouteResult {
  Tensor<S> probs;
  std::vector<std::vector<int>> selected;
};

namespace detail {

template <class S>
Tensor<S> init_normal(Rng& rng, Shape shape, double std_dev) {
  Tensor<S> t = Tensor<S>::zeros(std::move(shape), /*requires_grad=*/true);
  for (auto& v : t.values()) v = S(rng.normal() * std_dev);
  return t;
}

template <class S>
ExpertFfn<S> init_ffn(Rng& rng, int d, int hidden) {
  ExpertFfn<S> f;
  f.w1 = init_normal<S>(rng, {d, hidden}, kInitStd);
  f.b1 = Tensor<S>::zeros({hidden}, true);
  f.w2 = init_normal<S>(rng, {hidden, d}, kInitStd);
  f.b2 = Tensor<S>::zeros({d}, true);
  return f;
}

}  // namespace detail

template <class S>
class MoEModel {
public:
  MoEModel() = default;

  static MoEModel build(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    MoEModel m;
    m.cfg_ = cfg;
    Rng rng(mix64(seed, 0x6d6f64656cULL));
    const int d = cfg.model_dim;
    m.embedding_ = detail::init_normal<S>(rng, {cfg.vocab_size, d}, kInitStd);
    m.unembed_ = detail::init_normal<S>(rng, {d, cfg.vocab_size}, kInitStd);
    for (int l = 0; l < cfg.num_layers; ++l) {
      Block<S> b;
      b.has_attention = cfg.attention;
      if (cfg.attention) {
        b.wq = detail::init_normal<S>(rng, {d, d}, kInitStd);
        b.bq = Tensor<S>::zeros({d}, true);
        b.wk = detail::init_normal<S>(rng, {d, d}, kInitStd);
        b.bk = Tensor<S>::zeros({d}, true);
        b.wv = detail::init_normal<S>(rng, {d, d}, kInitStd);
        b.bv = Tensor<S>::zeros({d}, true);
        b.wo = detail::init_normal<S>(rng, {d, d}, kInitStd);
        b.bo = Tensor<S>::zeros({d}, true);
        b.ln1_g = Tensor<S>::from({d}, std::vector<S>(static_cast<size_t>(d), S(1)), true);
        b.ln1_b = Tensor<S>::zeros({d}, true);
      }
      b.ln2_g = Tensor<S>::from({d}, std::vector<S>(static_cast<size_t>(d), S(1)), true);
      b.ln2_b = Tensor<S>::zeros({d}, true);
      const int cols = cfg.experts_per_layer + (cfg.shared_expert ? 1 : 0);
      b.moe.router_w = detail::init_normal<S>(rng, {d, cols}, kInitStd);
      b.moe.router_b = Tensor<S>::zeros({cols}, true);
      for (int e = 0; e < cfg.experts_per_layer; ++e)
        b.moe.experts.push_back(detail::init_ffn<S>(rng, d, cfg.expert_hidden_dim));
      b.moe.excluded_domains.assign(static_cast<size_t>(cfg.experts_per_layer), {});
      if (cfg.shared_expert) b.moe.shared = detail::init_ffn<S>(rng, d, cfg.expert_hidden_dim);
      m.blocks_.push_back(std::move(b));
    }
    m.rebuild_groups();
    return m;
  }

  const ModelConfig& config() const { return cfg_; }
  std::vector<Block<S>>& blocks() { return blocks_; }
  const std::vector<Block<S>>& blocks() const { return blocks_; }
  Tensor<S>& embedding() { return embedding_; }
  Tensor<S>& unembed() { return unembed_; }

  int num_experts(int layer) const { return blocks_[static_cast<size_t>(layer)].moe.num_experts(); }

  const std::vector<ParamGroup<S>>& groups() const { return groups_; }

  const ParamGroup<S>* find_group(const std::string& name) const {
    for (const auto& g : groups_)
      if (g.name == name) return &g;
    return nullptr;
  }

  // Trainable parameters; teacher buffers excluded.
  std::vector<std::pair<std::string, Tensor<S>>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor<S>>> out;
    for (const auto& g : groups_) {
      int i = 0;
      for (const auto& t : g.tensors) out.emplace_back(g.name + "." + param_suffix(g, i++), t);
    }
    return out;
  }

  // Parameters plus frozen buffers, for checkpoints.
  std::vector<std::pair<std::string, Tensor<S>>> named_state() const {
    auto out = named_parameters();
    for (size_t l = 0; l < blocks_.size(); ++l) {
      const auto& moe = blocks_[l].moe;
      if (moe.adaptive) {
        out.emplace_back("layer." + std::to_string(l) + ".teacher.w", moe.adaptive->teacher_w);
        out.emplace_back("layer." + std::to_string(l) + ".teacher.b", moe.adaptive->teacher_b);
      }
    }
    return out;
  }

  void zero_grads() {
    for (auto& g : groups_)
      for (auto& t : g.tensors) t.zero_grad();
  }

  // Installs a fresh adaptive router per layer, teaching from the current
  // linear router weights.
  void install_adaptive_routers(uint64_t seed, S tau = S(kDefaultRouterTemperature)) {
    for (size_t l = 0; l < blocks_.size(); ++l) {
      auto& moe = blocks_[l].moe;
      moe.adaptive =
          init_adaptive_router<S>(moe.router_w, moe.router_b, mix64(seed, 0xada0 + l), tau);
    }
    rebuild_groups();
  }

  // Appends a bit-identical copy of a routed expert; the router (and the
  // adaptive router and teacher, when installed) gain a copied gate column.
  // Returns the new expert id.
  int add_expert_copy(int layer, int source) {
    auto& moe = blocks_[static_cast<size_t>(layer)].moe;
    if (source < 0 || source >= moe.num_experts())
      throw ArgumentError("add_expert_copy: no expert " + std::to_string(source));
    ExpertFfn<S> copy{clone(moe.experts[static_cast<size_t>(source)].w1),
                      clone(moe.experts[static_cast<size_t>(source)].b1),
                      clone(moe.experts[static_cast<size_t>(source)].w2),
                      clone(moe.experts[static_cast<size_t>(source)].b2)};
    moe.experts.push_back(std::move(copy));
    moe.excluded_domains.emplace_back();
    const int new_id = moe.num_experts() - 1;
    // the shared-expert gate column, when present, stays last
    moe.router_w = insert_routed_col(moe.router_w, source, new_id);
    moe.router_b = insert_routed_elem(moe.router_b, source, new_id);
    if (moe.adaptive) {
      auto& ar = *moe.adaptive;
      ar.w2 = insert_routed_col(ar.w2, source, new_id);
      ar.b2 = insert_routed_elem(ar.b2, source, new_id);
      ar.teacher_w = insert_routed_col(ar.teacher_w, source, new_id);
      ar.teacher_b = insert_routed_elem(ar.teacher_b, source, new_id);
    }
    rebuild_groups();
    return new_id;
  }

  // Routing probabilities and top-k selection for one layer. Ties break
  // toward the lowest expert index; excluded (availability-gated) experts
  // get probability exactly 0 and are never selected.
  RouteResult<S> route(Tape<S>& tape, int layer, const Tensor<S>& u,
                       const ForwardOptions& opts) const {
    const auto& moe = blocks_[static_cast<size_t>(layer)].moe;
    Tensor<S> logits;
    if (opts.use_adaptive) {
      if (!moe.adaptive) throw ArgumentError("route: adaptive router not installed");
      logits = adapt_route(tape, *moe.adaptive, u);
    } else {
      logits = tape.add_bias(tape.matmul(u, moe.router_w), moe.router_b);
    }
    const int T = u.shape()[0];
    const int cols = moe.router_cols();
    std::vector<uint8_t> avail;
    if (opts.training && opts.token_domains) {
      bool any = false;
      for (const auto& ex : moe.excluded_domains) any = any || !ex.empty();
      if (any) {
        avail.assign(static_cast<size_t>(T) * cols, 1);
        for (int e = 0; e < moe.num_experts(); ++e)
          for (int dom : moe.excluded_domains[static_cast<size_t>(e)])
            for (int t = 0; t < T; ++t)
              if ((*opts.token_domains)[static_cast<size_t>(t)] == dom)
                avail[static_cast<size_t>(t) * cols + e] = 0;
      }
    }
    RouteResult<S> out;
    out.probs = tape.softmax(logits, -1, avail.empty() ? nullptr : &avail);
    out.selected.resize(static_cast<size_t>(T));
    const int K = cfg_.top_k;
    const int routed = moe.num_experts();
    for (int t = 0; t < T; ++t) {
      std::vector<int> eligible;
      eligible.reserve(static_cast<size_t>(routed));
      for (int e = 0; e < routed; ++e)
        if (avail.empty() || avail[static_cast<size_t>(t) * cols + e]) eligible.push_back(e);
      if (static_cast<int>(eligible.size()) < K)
        throw ArgumentError("route: fewer than top_k experts available");
      std::stable_sort(eligible.begin(), eligible.end(), [&](int a, int b) {
        return out.probs.at(t, a) > out.probs.at(t, b);
      });
      eligible.resize(static_cast<size_t>(K));
      out.selected[static_cast<size_t>(t)] = std::move(eligible);
    }
    return out;
  }

  // Weighted sum of the selected experts' outputs (plus the always-on shared
  // expert when enabled). Gate values are the softmax probabilities
  // themselves, not renormalized over the selected set.
  Tensor<S> moe_forward(Tape<S>& tape, int layer, const Tensor<S>& u,
                        const RouteResult<S>& routing, const ForwardOptions& opts) const {
    const auto& moe = blocks_[static_cast<size_t>(layer)].moe;
    const int T = u.shape()[0];
    const int routed = moe.num_experts();

    // expert-major token lists
    std::vector<std::vector<int>> tokens_of(static_cast<size_t>(routed));
    for (int t = 0; t < T; ++t)
      for (int e : routing.selected[static_cast<size_t>(t)])
        tokens_of[static_cast<size_t>(e)].push_back(t);

    const DomainExpertMask* gate = nullptr;
    if (opts.update_gate) gate = &(*opts.update_gate)[static_cast<size_t>(layer)];

    Tensor<S> acc;
    for (int e = 0; e < routed; ++e) {
      const auto& toks = tokens_of[static_cast<size_t>(e)];
      if (toks.empty()) continue;
      // partition by domain when token-level filtering is active
      std::vector<std::pair<int, std::vector<int>>> parts;
      if (gate && opts.token_domains) {
        for (int t : toks) {
          const int dom = (*opts.token_domains)[static_cast<size_t>(t)];
          auto it = std::find_if(parts.begin(), parts.end(),
                                 [dom](const auto& p) { return p.first == dom; });
          if (it == parts.end())
            parts.push_back({dom, {t}});
          else
            it->second.push_back(t);
        }
        std::stable_sort(parts.begin(), parts.end(),
                         [](const auto& a, const auto& b) { return a.first < b.first; });
      } else {
        parts.push_back({-1, toks});
      }
      for (const auto& [dom, rows] : parts) {
        bool trainable = true;
        if (gate && dom >= 0)
          trainable = dom < static_cast<int>(gate->size()) &&
                      e < static_cast<int>((*gate)[static_cast<size_t>(dom)].size()) &&
                      (*gate)[static_cast<size_t>(dom)][static_cast<size_t>(e)] != 0;
        auto x = tape.gather_rows(u, rows);
        auto y = ffn_forward(tape, x, moe.experts[static_cast<size_t>(e)], trainable);
        std::vector<std::pair<int, int>> at;
        at.reserve(rows.size());
        for (int t : rows) at.emplace_back(t, e);
        auto gates = tape.gather_at(routing.probs, at);
        auto contrib = tape.scatter_rows_scaled(y, gates, rows, T);
        acc = acc.defined() ? tape.add(acc, contrib) : contrib;
      }
    }
    if (moe.shared) {
      auto y = ffn_forward(tape, u, *moe.shared, /*trainable=*/true);
      std::vector<std::pair<int, int>> at;
      std::vector<int> rows(static_cast<size_t>(T));
      for (int t = 0; t < T; ++t) {
        at.emplace_back(t, routed);  // shared gate column is last
        rows[static_cast<size_t>(t)] = t;
      }
      auto gates = tape.gather_at(routing.probs, at);
      auto contrib = tape.scatter_rows_scaled(y, gates, rows, T);
      acc = acc.defined() ? tape.add(acc, contrib) : contrib;
    }
    if (!acc.defined()) acc = Tensor<S>::zeros({T, cfg_.model_dim});
    return acc;
  }

  ForwardResult<S> forward(Tape<S>& tape, const PackedBatch& batch,
                           const ForwardOptions& opts) const {
    if (opts.token_domains == nullptr && opts.update_gate)
      throw ArgumentError("forward: update gate requires token domains");
    ForwardOptions o = opts;
    o.token_domains = opts.token_domains ? opts.token_domains : &batch.token_domain;
    ForwardResult<S> out;
    auto x = tape.embedding(embedding_, batch.tokens);
    for (size_t l = 0; l < blocks_.size(); ++l) {
      const Block<S>& b = blocks_[l];
      if (b.has_attention) {
        auto q = tape.add_bias(tape.matmul(x, b.wq), b.bq);
        auto k = tape.add_bias(tape.matmul(x, b.wk), b.bk);
        auto v = tape.add_bias(tape.matmul(x, b.wv), b.bv);
        auto att = tape.causal_attention(q, k, v, batch.seq_begin);
        auto proj = tape.add_bias(tape.matmul(att, b.wo), b.bo);
        x = tape.layer_norm(tape.add(x, proj), b.ln1_g, b.ln1_b);
      }
      LayerRecord<S> rec;
      rec.router_input = x;
      auto routing = route(tape, static_cast<int>(l), x, o);
      rec.probs = routing.probs;
      rec.selected = routing.selected;
      auto m = moe_forward(tape, static_cast<int>(l), x, routing, o);
      x = tape.layer_norm(tape.add(x, m), b.ln2_g, b.ln2_b);
      out.layers.push_back(std::move(rec));
    }
    out.logits = tape.matmul(x, unembed_);
    return out;
  }

  void rebuild_groups() {
    groups_.clear();
    groups_.push_back({"embed", GroupKind::Backbone, -1, -1, {embedding_}});
    groups_.push_back({"unembed", GroupKind::Backbone, -1, -1, {unembed_}});
    for (size_t l = 0; l < blocks_.size(); ++l) {
      Block<S>& b = blocks_[l];
      const std::string pre = "layer." + std::to_string(l) + ".";
      const int li = static_cast<int>(l);
      if (b.has_attention) {
        groups_.push_back({pre + "attn", GroupKind::Backbone, li, -1,
                           {b.wq, b.bq, b.wk, b.bk, b.wv, b.bv, b.wo, b.bo}});
        groups_.push_back({pre + "ln1", GroupKind::Backbone, li, -1, {b.ln1_g, b.ln1_b}});
      }
      groups_.push_back({pre + "ln2", GroupKind::Backbone, li, -1, {b.ln2_g, b.ln2_b}});
      groups_.push_back(
          {pre + "router", GroupKind::Router, li, -1, {b.moe.router_w, b.moe.router_b}});
      if (b.moe.adaptive) {
        auto& ar = *b.moe.adaptive;
        groups_.push_back(
            {pre + "adaptive_router", GroupKind::Router, li, -1, {ar.w1, ar.b1, ar.w2, ar.b2}});
      }
      for (size_t e = 0; e < b.moe.experts.size(); ++e) {
        auto& f = b.moe.experts[e];
        groups_.push_back({pre + "expert." + std::to_string(e), GroupKind::Expert, li,
                           static_cast<int>(e), {f.w1, f.b1, f.w2, f.b2}});
      }
      if (b.moe.shared) {
        auto& f = *b.moe.shared;
        groups_.push_back(
            {pre + "shared_expert", GroupKind::SharedExpert, li, -1, {f.w1, f.b1, f.w2, f.b2}});
      }
    }
  }

private:
  ModelConfig cfg_;
  Tensor<S> embedding_, unembed_;
  std::vector<Block<S>> blocks_;
  std::vector<ParamGroup<S>> groups_;

  static std::string param_suffix(const ParamGroup<S>& g, int i) {
    static const std::array<const char*, 8> attn{"wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"};
    static const std::array<const char*, 4> ffn{"w1", "b1", "w2", "b2"};
    static const std::array<const char*, 2> affine{"gain", "bias"};
    static const std::array<const char*, 2> lin{"w", "b"};
    if (g.kind == GroupKind::Expert || g.kind == GroupKind::SharedExpert)
      return ffn[static_cast<size_t>(i)];
    if (g.name == "embed" || g.name == "unembed") return "w";
    if (g.name.ends_with(".attn")) return attn[static_cast<size_t>(i)];
    if (g.name.ends_with(".ln1") || g.name.ends_with(".ln2")) return affine[static_cast<size_t>(i)];
    if (g.name.ends_with(".router")) return lin[static_cast<size_t>(i)];
    if (g.name.ends_with(".adaptive_router")) return ffn[static_cast<size_t>(i)];
    return "p" + std::to_string(i);
  }

  Tensor<S> ffn_forward(Tape<S>& tape, const Tensor<S>& x, const ExpertFfn<S>& f,
                        bool trainable) const {
    const Tensor<S> w1 = trainable ? f.w1 : f.w1.detach();
    const Tensor<S> b1 = trainable ? f.b1 : f.b1.detach();
    const Tensor<S> w2 = trainable ? f.w2 : f.w2.detach();
    const Tensor<S> b2 = trainable ? f.b2 : f.b2.detach();
    auto h = tape.gelu(tape.add_bias(tape.matmul(x, w1), b1));
    return tape.add_bias(tape.matmul(h, w2), b2);
  }

  // inserts a copy of column src directly after the routed block (before the
  // shared gate column when present) at position new_id
  Tensor<S> insert_routed_col(const Tensor<S>& t, int src, int new_id) const {
    // new_id == routed count - 1 and the shared column (if any) is last, so
    // appending-before-last is equivalent to: copy cols [0, new_id), insert
    // src copy at new_id, then the shared column.
    const int r = t.shape()[0], c = t.shape()[1];
    Tensor<S> out = Tensor<S>::zeros({r, c + 1}, t.requires_grad());
    auto widen = [&](const std::vector<S>& sv, std::vector<S>& dv) {
      if (sv.empty()) return;
      dv.assign(static_cast<size_t>(r) * (c + 1), S(0));
      for (int i = 0; i < r; ++i) {
        const S* srow = sv.data() + static_cast<size_t>(i) * c;
        S* drow = dv.data() + static_cast<size_t>(i) * (c + 1);
        for (int j = 0; j < new_id; ++j) drow[j] = srow[j];
        drow[new_id] = srow[src];
        for (int j = new_id; j < c; ++j) drow[j + 1] = srow[j];
      }
    };
    widen(t.values(), out.values());
    widen(t.impl()->opt_m, out.impl()->opt_m);
    widen(t.impl()->opt_v, out.impl()->opt_v);
    out.impl()->opt_steps = t.impl()->opt_steps;
    return out;
  }

  Tensor<S> insert_routed_elem(const Tensor<S>& t, int src, int new_id) const {
    const int n = t.shape()[0];
    Tensor<S> out = Tensor<S>::zeros({n + 1}, t.requires_grad());
    auto widen = [&](const std::vector<S>& sv, std::vector<S>& dv) {
      if (sv.empty()) return;
      dv.assign(static_cast<size_t>(n) + 1, S(0));
      for (int j = 0; j < new_id; ++j) dv[static_cast<size_t>(j)] = sv[static_cast<size_t>(j)];
      dv[static_cast<size_t>(new_id)] = sv[static_cast<size_t>(src)];
      for (int j = new_id; j < n; ++j) dv[static_cast<size_t>(j) + 1] = sv[static_cast<size_t>(j)];
    };
    widen(t.values(), out.values());
    widen(t.impl()->opt_m, out.impl()->opt_m);
    widen(t.impl()->opt_v, out.impl()->opt_v);
    out.impl()->opt_steps = t.impl()->opt_steps;
    return out;
  }
};

}  // namespace moelab
