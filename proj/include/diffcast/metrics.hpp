#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "diffcast/core.hpp"
#include "diffcast/tensor.hpp"

namespace diffcast::metrics {

struct ConfusionCounts {
  int64_t tp = 0;
  int64_t fp = 0;
  int64_t fn = 0;
  int64_t tn = 0;

  int64_t total() const { return tp + fp + fn + tn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o);
};

// 1 where the denormalized value >= threshold (physical units), else 0.
Tensor binarize(const Tensor& frames, real threshold, DataRange data_range);

ConfusionCounts confusion_counts(const Tensor& pred_mask, const Tensor& true_mask);

// tp / (tp + fn + fp); 0 when the denominator is 0.
real csi(const ConfusionCounts& c);

// 2(tp*tn - fn*fp) / ((tp+fn)(fn+tn) + (tp+fp)(fp+tn)); 0 when denominator is 0.
real hss(const ConfusionCounts& c);

// Max-pool of a binary mask with kernel = stride = pool.
Tensor max_pool_mask(const Tensor& mask, int64_t pool);

// CSI between the max-pooled binarized fields; pool=1 equals plain csi.
real pooled_csi(const Tensor& pred, const Tensor& truth, real threshold, int64_t pool, DataRange data_range);

// Structural similarity over a Gaussian window, averaged over positions where
// the window fits entirely inside the frame. Inputs are [H,W] in [0,1].
real ssim(const Tensor& pred_frame, const Tensor& true_frame, int64_t window = 11, real sigma = 1.5);

struct ThresholdScores {
  real csi = 0.0;
  real hss = 0.0;
  real csi_pool4 = 0.0;
  real csi_pool16 = 0.0;
};

struct MetricReport {
  std::map<real, ThresholdScores> per_threshold;
  real mean_csi = 0.0;
  real mean_hss = 0.0;
  real ssim = 0.0;
  std::vector<real> framewise_csi;  // length L_out, mean over thresholds
  std::vector<real> framewise_hss;

  std::string to_json_text() const;
  std::string framewise_csv() const;  // columns: lead_index, csi, hss
};

// Micro-averaged verification over an event set: counts are accumulated over
// all frames and events per threshold, scores computed from the totals, then
// averaged over thresholds. Predictions are compared via y_hat_clamped.
MetricReport evaluate(const std::vector<Prediction>& predictions, const std::vector<RadarSequence>& targets,
                      const std::vector<real>& thresholds, const std::vector<int64_t>& pools,
                      int64_t ssim_window = 11);

}  // namespace diffcast::metrics
