#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "neuroadapt/matrix.hpp"

namespace neuroadapt {

// A batch of C x T windows stored back to back, channel-major inside each
// window. Precomputed feature vectors travel as C = D, T = 1.
struct WindowBatch {
  std::size_t channels = 0;
  std::size_t samples = 0;
  std::vector<float> data;
  std::vector<std::string> record_ids;
  std::vector<std::string> subject_ids;
  std::optional<std::vector<int>> labels;

  std::size_t size() const { return record_ids.size(); }
  std::size_t window_size() const { return channels * samples; }
  std::span<const float> window(std::size_t i) const {
    return {data.data() + i * window_size(), window_size()};
  }
  std::span<float> window(std::size_t i) { return {data.data() + i * window_size(), window_size()}; }

  // Throws ShapeError if the buffers disagree with each other.
  void validate() const;
};

// What adaptation code receives. It has no label field at all, so nothing
// downstream of `strip_labels` can read ground truth.
class UnlabeledBatch {
 public:
  UnlabeledBatch() = default;

  std::size_t size() const { return record_ids_.size(); }
  std::size_t channels() const { return channels_; }
  std::size_t samples() const { return samples_; }
  std::span<const float> data() const { return data_; }
  std::span<const float> window(std::size_t i) const {
    return {data_.data() + i * channels_ * samples_, channels_ * samples_};
  }
  const std::vector<std::string>& record_ids() const { return record_ids_; }

 private:
  friend UnlabeledBatch strip_labels(WindowBatch batch);
  std::size_t channels_ = 0;
  std::size_t samples_ = 0;
  std::vector<float> data_;
  std::vector<std::string> record_ids_;
};

UnlabeledBatch strip_labels(WindowBatch batch);

// z = g(x) for a batch, with enough provenance to trace rows back to records.
struct FeatureBatch {
  Matrix z;
  std::string encoder_id;
  std::vector<std::string> record_ids;

  std::size_t size() const { return z.rows(); }
  std::size_t dim() const { return z.cols(); }
};

}  // namespace neuroadapt
