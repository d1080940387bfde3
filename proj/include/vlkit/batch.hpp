#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "vlkit/config.hpp"

namespace vlkit {

/// Reserved vocabulary ids.
inline constexpr std::int32_t kPadId = 0;
inline constexpr std::int32_t kClsId = 1;
inline constexpr std::int32_t kSepId = 2;
inline constexpr std::int32_t kMaskId = 3;
inline constexpr std::int32_t kUnkId = 4;
inline constexpr std::int32_t kNumReservedIds = 5;

/// Candidate regions of one example: each candidate is a list of patch indices.
using RegionSet = std::vector<std::vector<std::size_t>>;

/// Collated examples. Text is row-major (size x text_len); images are
/// row-major (size x H x W x C), already standardized to [-1, 1].
struct Batch {
    std::size_t size = 0;
    std::size_t text_len = 0;
    std::vector<std::int32_t> token_ids;
    std::vector<std::uint8_t> text_mask;  // 1 = real token, 0 = padding
    ImageGeometry geometry;
    std::vector<float> images;    // empty for text-only batches
    std::vector<float> images_b;  // second image of pair tasks
    std::vector<std::int32_t> labels;
    std::vector<std::int32_t> mlm_labels;  // size x text_len, kIgnoreLabel where unmasked
    std::vector<RegionSet> regions;
    std::vector<std::string> example_ids;

    bool has_images() const { return !images.empty(); }
};

} // namespace vlkit
