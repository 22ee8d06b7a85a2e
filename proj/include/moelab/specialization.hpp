// SPDX-License-Identifier: Apache-2.0
//
// Domain-guided expert specialization: per-layer tracking of how often each
// domain routes to each expert, a relative-threshold binary mask over that
// affinity, periodic EMA refresh, and duplication of experts claimed by more
// than one domain.
#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "moelab/model.hpp"

namespace moelab {

inline constexpr double kDefaultMaskThreshold = 0.6;   // relative, inclusive
inline constexpr double kDefaultEmaWeight = 0.9;       // weight on the fresh observation

struct DuplicationRecord {
  int layer = 0;
  int source = 0;
  int copy = 0;
  int domain = 0;  // domain reassigned to the copy
  long long step = 0;
};

// Affinity bookkeeping for one MoE layer. Raw counts are exact integers;
// fractions are derived on read.
class AffinityState {
public:
  AffinityState() = default;
  AffinityState(int num_domains, int num_experts, double threshold = kDefaultMaskThreshold,
                double ema_weight = kDefaultEmaWeight)
      : domains_(num_domains),
        experts_(num_experts),
        threshold_(threshold),
        ema_weight_(ema_weight),
        sel_count_(static_cast<size_t>(num_domains),
                   std::vector<long long>(static_cast<size_t>(num_experts), 0)),
        token_count_(static_cast<size_t>(num_domains), 0),
        smoothed_(static_cast<size_t>(num_domains),
                  std::vector<double>(static_cast<size_t>(num_experts), 0.0)),
        mask_(static_cast<size_t>(num_domains),
              std::vector<uint8_t>(static_cast<size_t>(num_experts), 1)) {}

  int num_domains() const { return domains_; }
  int num_experts() const { return experts_; }
  double threshold() const { return threshold_; }
  double ema_weight() const { return ema_weight_; }
  bool warmed() const { return warmed_; }

  // raw affinity A[d][e] = selections / domain tokens, in [0, 1]
  std::vector<std::vector<double>> raw_affinity() const {
    std::vector<std::vector<double>> out(static_cast<size_t>(domains_),
                                         std::vector<double>(static_cast<size_t>(experts_), 0.0));
    for (int d = 0; d < domains_; ++d) {
      if (token_count_[static_cast<size_t>(d)] == 0) continue;
      for (int e = 0; e < experts_; ++e)
        out[static_cast<size_t>(d)][static_cast<size_t>(e)] =
            double(sel_count_[static_cast<size_t>(d)][static_cast<size_t>(e)]) /
            double(token_count_[static_cast<size_t>(d)]);
    }
    return out;
  }

  const std::vector<std::vector<double>>& smoothed() const { return smoothed_; }
  std::vector<std::vector<double>>& smoothed_mutable() { return smoothed_; }
  const std::vector<std::vector<uint8_t>>& mask() const { return mask_; }
  DomainExpertMask& mask_mutable() { return mask_; }
  long long domain_tokens(int d) const { return token_count_[static_cast<size_t>(d)]; }

  void accumulate(const std::vector<std::vector<int>>& selected,
                  const std::vector<int>& token_domains) {
    if (selected.size() != token_domains.size())
      throw ArgumentError("accumulate_affinity: records vs labels size mismatch");
    for (size_t t = 0; t < selected.size(); ++t) {
      const int d = token_domains[t];
      if (d < 0 || d >= domains_)
        throw ArgumentError("accumulate_affinity: unknown domain label " + std::to_string(d));
      ++token_count_[static_cast<size_t>(d)];
      for (int e : selected[t]) ++sel_count_[static_cast<size_t>(d)][static_cast<size_t>(e)];
    }
  }

  // M[d][e] = 1 iff smoothed[d][e] >= threshold * row max; an all-zero row
  // (domain never seen) yields an all-ones row so the domain is not starved.
  void derive_mask() { mask_ = derive_mask_for(smoothed_, threshold_); }

  static DomainExpertMask derive_mask_for(const std::vector<std::vector<double>>& affinity,
                                          double threshold) {
    DomainExpertMask mask(affinity.size());
    for (size_t d = 0; d < affinity.size(); ++d) {
      const auto& row = affinity[d];
      const double mx = row.empty() ? 0.0 : *std::max_element(row.begin(), row.end());
      mask[d].assign(row.size(), 0);
      if (mx <= 0.0) {
        mask[d].assign(row.size(), 1);
        continue;
      }
      for (size_t e = 0; e < row.size(); ++e)
        if (row[e] >= threshold * mx) mask[d][e] = 1;
    }
    return mask;
  }

  // smoothed <- w*fresh + (1-w)*smoothed (first refresh adopts fresh
  // outright), mask re-derived, fresh counters reset. Returns the fresh
  // fractions that were blended in.
  std::vector<std::vector<double>> ema_refresh() {
    auto fresh = raw_affinity();
    for (int d = 0; d < domains_; ++d) {
      if (token_count_[static_cast<size_t>(d)] == 0) continue;  // keep the old row
      for (int e = 0; e < experts_; ++e) {
        auto& s = smoothed_[static_cast<size_t>(d)][static_cast<size_t>(e)];
        const double f = fresh[static_cast<size_t>(d)][static_cast<size_t>(e)];
        s = warmed_ ? ema_weight_ * f + (1.0 - ema_weight_) * s : f;
      }
    }
    warmed_ = true;
    derive_mask();
    for (auto& row : sel_count_) std::fill(row.begin(), row.end(), 0);
    std::fill(token_count_.begin(), token_count_.end(), 0);
    return fresh;
  }

  // Registers the structural effect of duplicating `source` into `copy`
  // (appended at index copy): the copy owns `domain`; the source keeps its
  // other domains.
  void apply_duplication(int source, int copy, int domain) {
    experts_ += 1;
    for (int d = 0; d < domains_; ++d) {
      auto& counts = sel_count_[static_cast<size_t>(d)];
      counts.insert(counts.begin() + copy, 0);
      auto& sm = smoothed_[static_cast<size_t>(d)];
      const double src_val = sm[static_cast<size_t>(source)];
      sm.insert(sm.begin() + copy, d == domain ? src_val : 0.0);
      if (d == domain) sm[static_cast<size_t>(source)] = 0.0;
      auto& mrow = mask_[static_cast<size_t>(d)];
      mrow.insert(mrow.begin() + copy, d == domain ? 1 : 0);
      if (d == domain) mrow[static_cast<size_t>(source)] = 0;
    }
  }

  // Jaccard overlap of two domains' mask rows.
  double overlap(int d1, int d2) const {
    const auto& a = mask_[static_cast<size_t>(d1)];
    const auto& b = mask_[static_cast<size_t>(d2)];
    int inter = 0, uni = 0;
    for (size_t e = 0; e < a.size(); ++e) {
      inter += (a[e] && b[e]) ? 1 : 0;
      uni += (a[e] || b[e]) ? 1 : 0;
    }
    return uni == 0 ? 0.0 : double(inter) / double(uni);
  }

private:
  int domains_ = 0;
  int experts_ = 0;
  double threshold_ = kDefaultMaskThreshold;
  double ema_weight_ = kDefaultEmaWeight;
  std::vector<std::vector<long long>> sel_count_;
  std::vector<long long> token_count_;
  std::vector<std::vector<double>> smoothed_;
  DomainExpertMask mask_;
  bool warmed_ = false;
};

// One AffinityState per MoE layer plus the duplication budget/log.
class SpecializationState {
public:
  SpecializationState() = default;
  SpecializationState(int num_layers, int num_domains, int num_experts,
                      double threshold = kDefaultMaskThreshold,
                      double ema_weight = kDefaultEmaWeight, int duplication_cap = 0)
      : duplication_cap_(duplication_cap) {
    for (int l = 0; l < num_layers; ++l)
      layers_.emplace_back(num_domains, num_experts, threshold, ema_weight);
  }

  std::vector<AffinityState>& layers() { return layers_; }
  const std::vector<AffinityState>& layers() const { return layers_; }
  AffinityState& layer(int l) { return layers_[static_cast<size_t>(l)]; }
  const std::vector<DuplicationRecord>& duplication_log() const { return log_; }
  const std::vector<std::string>& warnings() const { return warnings_; }
  int duplication_cap() const { return duplication_cap_; }

  template <class S>
  void accumulate(const ForwardResult<S>& result, const std::vector<int>& token_domains) {
    for (size_t l = 0; l < layers_.size(); ++l)
      layers_[l].accumulate(result.layers[l].selected, token_domains);
  }

  // current masks in the shape the forward pass consumes
  std::vector<DomainExpertMask> masks() const {
    std::vector<DomainExpertMask> out;
    out.reserve(layers_.size());
    for (const auto& st : layers_) out.push_back(st.mask());
    return out;
  }

  void ema_refresh_all() {
    for (auto& st : layers_) {
      st.ema_refresh();
      for (int d = 0; d < st.num_domains(); ++d) {
        const auto& row = st.smoothed()[static_cast<size_t>(d)];
        if (*std::max_element(row.begin(), row.end()) <= 0.0)
          warnings_.push_back("domain " + std::to_string(d) +
                              " has no routing evidence; mask row left all-ones");
      }
    }
  }

  // Duplicates every expert whose mask column carries more than one domain.
  // The copy goes to the lower-affinity domain (ties: the higher-indexed
  // domain moves); availability gating excludes the copy from every other
  // domain and the source from the domains that moved.
  template <class S>
  std::vector<DuplicationRecord> resolve_shared_experts(MoEModel<S>& model, long long step) {
    std::vector<DuplicationRecord> made;
    for (size_t l = 0; l < layers_.size(); ++l) {
      AffinityState& st = layers_[l];
      auto& moe = model.blocks()[l].moe;
      for (int e = 0; e < st.num_experts(); ++e) {
        std::vector<int> owners;
        for (int d = 0; d < st.num_domains(); ++d)
          if (st.mask()[static_cast<size_t>(d)][static_cast<size_t>(e)]) owners.push_back(d);
        if (owners.size() < 2) continue;
        // keeper = max smoothed affinity, ties toward the lower domain index
        int keeper = owners[0];
        for (int d : owners)
          if (st.smoothed()[static_cast<size_t>(d)][static_cast<size_t>(e)] >
              st.smoothed()[static_cast<size_t>(keeper)][static_cast<size_t>(e)])
            keeper = d;
        for (int d : owners) {
          if (d == keeper) continue;
          if (duplication_cap_ > 0 &&
              static_cast<int>(log_.size()) + static_cast<int>(made.size()) >= duplication_cap_) {
            warnings_.push_back("duplication budget exceeded at layer " + std::to_string(l) +
                                ", expert " + std::to_string(e) + " stays shared");
            continue;
          }
          const int copy = model.add_expert_copy(static_cast<int>(l), e);
          st.apply_duplication(e, copy, d);
          // the copy serves only domain d; the source no longer serves d
          auto& excl = moe.excluded_domains;
          for (int other = 0; other < st.num_domains(); ++other)
            if (other != d) excl[static_cast<size_t>(copy)].push_back(other);
          excl[static_cast<size_t>(e)].push_back(d);
          made.push_back({static_cast<int>(l), e, copy, d, step});
        }
      }
    }
    log_.insert(log_.end(), made.begin(), made.end());
    return made;
  }

  // Mean Jaccard overlap across all domain pairs, averaged over layers.
  double mean_cross_domain_overlap() const {
    double total = 0.0;
    int n = 0;
    for (const auto& st : layers_) {
      for (int a = 0; a < st.num_domains(); ++a)
        for (int b = a + 1; b < st.num_domains(); ++b) {
          total += st.overlap(a, b);
          ++n;
        }
    }
    return n == 0 ? 0.0 : total / n;
  }

private:
  std::vector<AffinityState> layers_;
  std::vector<DuplicationRecord> log_;
  std::vector<std::string> warnings_;
  int duplication_cap_ = 0;  // 0 = unlimited
};

// Grouped-mode gradient filter: zero the gradient buffers of every routed
// expert the batch domain may not update. The token-level (mixed-mode)
// filter is structural: moe_forward runs non-permitted (expert, domain)
// slices against detached weights, so those contributions never reach the
// buffers in the first place.
template <class S>
void expert_gradient_filter(MoEModel<S>& model, const std::vector<DomainExpertMask>& masks,
                            int batch_domain) {
  for (const auto& g : model.groups()) {
    if (g.kind != GroupKind::Expert) continue;
    const auto& row = masks[static_cast<size_t>(g.layer)][static_cast<size_t>(batch_domain)];
    if (g.expert < static_cast<int>(row.size()) && row[static_cast<size_t>(g.expert)]) continue;
    for (const auto& t : g.tensors) {
      Tensor<S> h = t;  // handles share storage
      h.zero_grad();
    }
  }
}

}  // namespace moelab
