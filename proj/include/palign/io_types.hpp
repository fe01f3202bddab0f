#pragma once

#include <cstdint>
#include <optional>
#include <string>

namespace palign {

/// One (sample id, image feature index, label, optional raw text) entry of the
/// assembly dataset. Multi-label manifest lines are expanded upstream into one
/// record per label, so downstream code only ever sees single-label samples.
struct TripletRecord {
    std::string sample_id;
    std::size_t image_feature_index = 0;
    int label = -1;
    std::optional<std::string> raw_text;
};

}  // namespace palign
