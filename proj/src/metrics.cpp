#include "diffcast/metrics.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace diffcast::metrics {

ConfusionCounts& ConfusionCounts::operator+=(const ConfusionCounts& o) {
  tp += o.tp;
  fp += o.fp;
  fn += o.fn;
  tn += o.tn;
  return *this;
}

Tensor binarize(const Tensor& frames, real threshold, DataRange data_range) {
  if (threshold < data_range.lo || threshold > data_range.hi)
    throw std::invalid_argument("binarize: threshold outside data_range");
  Tensor out = frames;
  real* d = out.data();
  for (int64_t i = 0; i < out.numel(); ++i)
    d[i] = (denormalize_value(d[i], data_range) >= threshold) ? 1.0 : 0.0;
  return out;
}

ConfusionCounts confusion_counts(const Tensor& pred_mask, const Tensor& true_mask) {
  check_same_shape(pred_mask, true_mask, "confusion_counts");
  ConfusionCounts c;
  const real* p = pred_mask.data();
  const real* t = true_mask.data();
  for (int64_t i = 0; i < pred_mask.numel(); ++i) {
    if ((p[i] != 0.0 && p[i] != 1.0) || (t[i] != 0.0 && t[i] != 1.0))
      throw std::invalid_argument("confusion_counts: masks must be binary");
    if (p[i] == 1.0 && t[i] == 1.0) ++c.tp;
    else if (p[i] == 1.0) ++c.fp;
    else if (t[i] == 1.0) ++c.fn;
    else ++c.tn;
  }
  return c;
}

real csi(const ConfusionCounts& c) {
  const int64_t denom = c.tp + c.fn + c.fp;
  if (denom == 0) return 0.0;
  return static_cast<real>(c.tp) / static_cast<real>(denom);
}

real hss(const ConfusionCounts& c) {
  const real tp = static_cast<real>(c.tp), fp = static_cast<real>(c.fp);
  const real fn = static_cast<real>(c.fn), tn = static_cast<real>(c.tn);
  const real denom = (tp + fn) * (fn + tn) + (tp + fp) * (fp + tn);
  if (denom == 0.0) return 0.0;
  return 2.0 * (tp * tn - fn * fp) / denom;
}

Tensor max_pool_mask(const Tensor& mask, int64_t pool) {
  if (mask.ndim() != 2) throw std::invalid_argument("max_pool_mask expects [H,W]");
  if (pool < 1) throw std::invalid_argument("max_pool_mask: pool must be >= 1");
  const int64_t H = mask.size(0), W = mask.size(1);
  if (H % pool != 0 || W % pool != 0)
    throw std::invalid_argument("max_pool_mask: spatial size not divisible by pool");
  Tensor out({H / pool, W / pool});
  for (int64_t i = 0; i < H / pool; ++i)
    for (int64_t j = 0; j < W / pool; ++j) {
      real m = 0.0;
      for (int64_t a = 0; a < pool; ++a)
        for (int64_t b = 0; b < pool; ++b) m = std::max(m, mask[(i * pool + a) * W + j * pool + b]);
      out[i * (W / pool) + j] = m;
    }
  return out;
}

real pooled_csi(const Tensor& pred, const Tensor& truth, real threshold, int64_t pool, DataRange data_range) {
  Tensor pm = max_pool_mask(binarize(pred, threshold, data_range), pool);
  Tensor tm = max_pool_mask(binarize(truth, threshold, data_range), pool);
  return csi(confusion_counts(pm, tm));
}

namespace {

std::vector<real> gaussian_kernel_1d(int64_t window, real sigma) {
  std::vector<real> k(static_cast<size_t>(window));
  const real c = static_cast<real>(window - 1) / 2.0;
  real sum = 0.0;
  for (int64_t i = 0; i < window; ++i) {
    const real d = static_cast<real>(i) - c;
    k[static_cast<size_t>(i)] = std::exp(-d * d / (2.0 * sigma * sigma));
    sum += k[static_cast<size_t>(i)];
  }
  for (auto& v : k) v /= sum;
  return k;
}

}  // namespace

real ssim(const Tensor& pred_frame, const Tensor& true_frame, int64_t window, real sigma) {
  check_same_shape(pred_frame, true_frame, "ssim");
  if (pred_frame.ndim() != 2) throw std::invalid_argument("ssim expects [H,W] frames");
  const int64_t H = pred_frame.size(0), W = pred_frame.size(1);
  if (H < window || W < window)
    throw std::invalid_argument("ssim: frame smaller than the " + std::to_string(window) + "x" +
                                std::to_string(window) + " window");
  const std::vector<real> k = gaussian_kernel_1d(window, sigma);
  constexpr real C1 = 0.01 * 0.01;
  constexpr real C2 = 0.03 * 0.03;

  const real* x = pred_frame.data();
  const real* y = true_frame.data();
  real total = 0.0;
  int64_t count = 0;
  for (int64_t i = 0; i + window <= H; ++i)
    for (int64_t j = 0; j + window <= W; ++j) {
      real mx = 0.0, my = 0.0, mxx = 0.0, myy = 0.0, mxy = 0.0;
      for (int64_t a = 0; a < window; ++a)
        for (int64_t b = 0; b < window; ++b) {
          const real wgt = k[static_cast<size_t>(a)] * k[static_cast<size_t>(b)];
          const real xv = x[(i + a) * W + (j + b)];
          const real yv = y[(i + a) * W + (j + b)];
          mx += wgt * xv;
          my += wgt * yv;
          mxx += wgt * xv * xv;
          myy += wgt * yv * yv;
          mxy += wgt * xv * yv;
        }
      const real vx = mxx - mx * mx;
      const real vy = myy - my * my;
      const real cov = mxy - mx * my;
      const real num = (2.0 * mx * my + C1) * (2.0 * cov + C2);
      const real den = (mx * mx + my * my + C1) * (vx + vy + C2);
      total += num / den;
      ++count;
    }
  return total / static_cast<real>(count);
}

std::string MetricReport::to_json_text() const {
  nlohmann::json j;
  nlohmann::json per;
  for (const auto& [thr, s] : per_threshold) {
    nlohmann::json e;
    e["csi"] = s.csi;
    e["hss"] = s.hss;
    e["csi_pool4"] = s.csi_pool4;
    e["csi_pool16"] = s.csi_pool16;
    std::ostringstream key;
    key << thr;
    per[key.str()] = e;
  }
  j["per_threshold"] = per;
  j["mean_csi"] = mean_csi;
  j["mean_hss"] = mean_hss;
  j["ssim"] = ssim;
  j["framewise_csi"] = framewise_csi;
  j["framewise_hss"] = framewise_hss;
  return j.dump(2);
}

std::string MetricReport::framewise_csv() const {
  std::ostringstream os;
  os << "lead_index,csi,hss\n";
  for (size_t i = 0; i < framewise_csi.size(); ++i)
    os << i << "," << framewise_csi[i] << "," << framewise_hss[i] << "\n";
  return os.str();
}

MetricReport evaluate(const std::vector<Prediction>& predictions, const std::vector<RadarSequence>& targets,
                      const std::vector<real>& thresholds, const std::vector<int64_t>& pools,
                      int64_t ssim_window) {
  if (predictions.size() != targets.size())
    throw std::invalid_argument("evaluate: prediction/target list length mismatch");
  if (predictions.empty()) throw std::invalid_argument("evaluate: empty event set");
  if (thresholds.empty()) throw std::invalid_argument("evaluate: no thresholds");

  const int64_t L = targets[0].length();
  const size_t n_thr = thresholds.size();

  // counts[threshold][lead]; pooled counts aggregated over all frames.
  std::vector<std::vector<ConfusionCounts>> counts(n_thr, std::vector<ConfusionCounts>(static_cast<size_t>(L)));
  std::map<int64_t, std::vector<ConfusionCounts>> pool_counts;
  for (int64_t p : pools) pool_counts[p] = std::vector<ConfusionCounts>(n_thr);

  real ssim_total = 0.0;
  int64_t ssim_frames = 0;

  for (size_t e = 0; e < predictions.size(); ++e) {
    const Prediction& pr = predictions[e];
    const RadarSequence& tg = targets[e];
    if (pr.y_hat_clamped.shape() != tg.frames.shape())
      throw std::invalid_argument("evaluate: prediction/target shape mismatch at event " + std::to_string(e));
    if (tg.length() != L) throw std::invalid_argument("evaluate: inconsistent sequence lengths");
    const int64_t H = tg.height(), W = tg.width(), C = tg.channels();
    if (C != 1) throw std::invalid_argument("evaluate: metrics defined for single-channel frames");

    for (int64_t f = 0; f < L; ++f) {
      Tensor pf = pr.y_hat_clamped.slice_axis0(f, 1).reshaped({H, W});
      Tensor tf = tg.frames.slice_axis0(f, 1).reshaped({H, W});
      for (size_t ti = 0; ti < n_thr; ++ti) {
        Tensor pm = binarize(pf, thresholds[ti], tg.data_range);
        Tensor tm = binarize(tf, thresholds[ti], tg.data_range);
        counts[ti][static_cast<size_t>(f)] += confusion_counts(pm, tm);
        for (int64_t p : pools)
          pool_counts[p][ti] += confusion_counts(max_pool_mask(pm, p), max_pool_mask(tm, p));
      }
      ssim_total += ssim(pf, tf, ssim_window);
      ++ssim_frames;
    }
  }

  MetricReport report;
  report.framewise_csi.assign(static_cast<size_t>(L), 0.0);
  report.framewise_hss.assign(static_cast<size_t>(L), 0.0);

  for (size_t ti = 0; ti < n_thr; ++ti) {
    ConfusionCounts total;
    for (int64_t f = 0; f < L; ++f) {
      const ConfusionCounts& c = counts[ti][static_cast<size_t>(f)];
      total += c;
      report.framewise_csi[static_cast<size_t>(f)] += csi(c) / static_cast<real>(n_thr);
      report.framewise_hss[static_cast<size_t>(f)] += hss(c) / static_cast<real>(n_thr);
    }
    ThresholdScores s;
    s.csi = csi(total);
    s.hss = hss(total);
    for (int64_t p : pools) {
      const real v = csi(pool_counts[p][ti]);
      if (p == 4) s.csi_pool4 = v;
      if (p == 16) s.csi_pool16 = v;
    }
    report.per_threshold[thresholds[ti]] = s;
    report.mean_csi += s.csi / static_cast<real>(n_thr);
    report.mean_hss += s.hss / static_cast<real>(n_thr);
  }
  report.ssim = ssim_total / static_cast<real>(ssim_frames);
  return report;
}

}  // namespace diffcast::metrics
