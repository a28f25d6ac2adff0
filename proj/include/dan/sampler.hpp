#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "dan/errors.hpp"
#include "dan/manifest.hpp"
#include "dan/rng.hpp"

namespace dan {

// Inverse-frequency balanced sampling: each record carries weight 1/n_class,
// which is the same as drawing a class uniformly and then a member uniformly.
// The index stream is a pure function of (records, seed).
class BalancedSampler {
 public:
  BalancedSampler(const std::vector<AnnotationRecord>& records, std::uint64_t seed)
      : rng_(seed, /*stream=*/0x73616d706c65ULL) {
    for (std::size_t i = 0; i < records.size(); ++i) {
      if (!records[i].expr) throw LabelError("balanced_sampler: record without expr label");
      by_class_[static_cast<std::size_t>(*records[i].expr)].push_back(static_cast<std::int64_t>(i));
    }
    for (int c = 0; c < kNumClasses; ++c)
      if (by_class_[static_cast<std::size_t>(c)].empty())
        throw CoverageError(std::string("balanced_sampler: class ") + kClassNames[c] +
                            " has no records");
  }

  std::int64_t next() {
    auto& bucket = by_class_[static_cast<std::size_t>(rng_.next_below(kNumClasses))];
    return bucket[static_cast<std::size_t>(rng_.next_below(bucket.size()))];
  }

 private:
  std::array<std::vector<std::int64_t>, kNumClasses> by_class_;
  KeyedRng rng_;
};

}  // namespace dan
