// SPDX-License-Identifier: Apache-2.0
#include "pmtmae/analysis.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdio>

#include "pmtmae/distill.hpp"

namespace pmt {

namespace {

template <class V>
double pearson_impl(std::span<const V> x, std::span<const V> y) {
  require(x.size() == y.size(), ErrorKind::Contract, "pearson_r: vectors differ in length");
  require(x.size() >= 2, ErrorKind::Contract, "pearson_r: need at least two entries");
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (!(sxx > 0.0) || !(syy > 0.0)) fail(ErrorKind::Degenerate, "pearson_r: undefined for a constant vector");
  const double r = sxy / std::sqrt(sxx * syy);
  return std::clamp(r, -1.0, 1.0);
}

}  // namespace

double pearson_r(std::span<const double> x, std::span<const double> y) { return pearson_impl(x, y); }
double pearson_r(std::span<const float> x, std::span<const float> y) { return pearson_impl(x, y); }

double CorrHistogram::mean_abs_r() const {
  const std::size_t defined = total - undefined;
  return defined ? sum_abs_r / static_cast<double>(defined) : 0.0;
}

std::vector<double> uniform_edges(std::size_t bins) {
  require(bins >= 1, ErrorKind::Config, "histogram needs at least one bin");
  std::vector<double> e(bins + 1);
  for (std::size_t i = 0; i <= bins; ++i) e[i] = -1.0 + 2.0 * static_cast<double>(i) / static_cast<double>(bins);
  e.back() = 1.0;
  return e;
}

std::size_t bin_index(double r, std::size_t bins) {
  const double pos = std::floor((r + 1.0) * static_cast<double>(bins) / 2.0);
  if (pos < 0.0) return 0;
  return std::min(bins - 1, static_cast<std::size_t>(pos));
}

void add_sample(CorrHistogram& h, double r) {
  ++h.counts[bin_index(r, h.counts.size())];
  ++h.total;
  h.sum_abs_r += std::abs(r);
}

CorrHistogram rebin(const CorrHistogram& h, std::size_t factor) {
  require(factor >= 1 && h.counts.size() % factor == 0, ErrorKind::Contract,
          "rebin: factor must divide the bin count");
  CorrHistogram out = h;
  const std::size_t bins = h.counts.size() / factor;
  out.counts.assign(bins, 0);
  out.edges.clear();
  for (std::size_t i = 0; i < bins; ++i) {
    out.edges.push_back(h.edges[i * factor]);
    for (std::size_t j = 0; j < factor; ++j) out.counts[i] += h.counts[i * factor + j];
  }
  out.edges.push_back(h.edges.back());
  return out;
}

std::vector<CorrHistogram> correlation_histogram(const Model<float>& model,
                                                 const std::vector<PatchedSample>& samples,
                                                 const CorrOptions& opt) {
  nd::NoGradGuard ng;
  require(!samples.empty(), ErrorKind::Contract, "corr-hist: empty dataset");
  require(opt.batch_size >= 1, ErrorKind::Contract, "corr-hist: batch size must be positive");
  const auto& mc = model.config();
  std::vector<CorrHistogram> hists(mc.encoder_blocks);
  for (std::size_t b = 0; b < hists.size(); ++b) {
    hists[b].block = b;
    hists[b].edges = uniform_edges(opt.bins);
    hists[b].counts.assign(opt.bins, 0);
  }
  const std::size_t C = mc.dim;
  for (std::size_t i = 0; i < samples.size(); i += opt.batch_size) {
    std::vector<const PatchSet*> batch;
    std::vector<MaskPlan> plans;
    for (std::size_t j = i; j < std::min(samples.size(), i + opt.batch_size); ++j) {
      batch.push_back(&samples[j].patches);
      plans.push_back(opt.masked ? make_mask(mc.num_patches, mc.mask_ratio, mix_seed(opt.seed, samples[j].id))
                                 : full_visibility(mc.num_patches));
    }
    auto enc = model.encode(batch, plans, true);
    for (std::size_t blk = 0; blk < enc.traces.size(); ++blk) {
      auto a = enc.traces[blk].attn_out.data();
      auto m = enc.traces[blk].mlp_out.data();
      const std::size_t rows = enc.traces[blk].attn_out.numel() / C;
      for (std::size_t r = 0; r < rows; ++r) {
        try {
          add_sample(hists[blk], pearson_r(a.subspan(r * C, C), m.subspan(r * C, C)));
        } catch (const Error& e) {
          if (e.kind() != ErrorKind::Degenerate) throw;
          ++hists[blk].undefined;
          ++hists[blk].total;
        }
      }
    }
  }
  return hists;
}

std::string corr_jsonl(const std::vector<CorrHistogram>& hists) {
  std::string out;
  for (const auto& h : hists) {
    nlohmann::ordered_json j;
    j["block"] = h.block;
    j["edges"] = h.edges;
    j["counts"] = h.counts;
    j["undefined"] = h.undefined;
    j["total"] = h.total;
    j["mean_abs_r"] = h.mean_abs_r();
    out += j.dump() + "\n";
  }
  return out;
}

std::string corr_csv(const std::vector<CorrHistogram>& hists) {
  std::string out = "block,bin_lo,bin_hi,count\n";
  char buf[128];
  for (const auto& h : hists) {
    for (std::size_t i = 0; i < h.counts.size(); ++i) {
      const int n = std::snprintf(buf, sizeof(buf), "%zu,%.6g,%.6g,%zu\n", h.block, h.edges[i], h.edges[i + 1],
                                  h.counts[i]);
      out.append(buf, static_cast<std::size_t>(n));
    }
  }
  return out;
}

std::string export_features(const Model<float>& model, const std::vector<PatchedSample>& samples,
                            std::size_t batch_size) {
  nd::NoGradGuard ng;
  require(batch_size >= 1, ErrorKind::Contract, "export-features: batch size must be positive");
  const auto& mc = model.config();
  const std::size_t width = 3 * mc.dim;
  std::string out = "sample_id,label";
  for (std::size_t c = 0; c < width; ++c) out += ",f" + std::to_string(c);
  out += "\n";
  const MaskPlan full = full_visibility(mc.num_patches);
  char buf[64];
  for (std::size_t i = 0; i < samples.size(); i += batch_size) {
    std::vector<const PatchSet*> batch;
    for (std::size_t j = i; j < std::min(samples.size(), i + batch_size); ++j) batch.push_back(&samples[j].patches);
    const std::vector<MaskPlan> plans(batch.size(), full);
    auto feats = model.classify_features(model.encode(batch, plans));
    auto d = feats.data();
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const auto& s = samples[i + b];
      out += std::to_string(s.id) + "," + std::to_string(s.label);
      for (std::size_t c = 0; c < width; ++c) {
        const int n = std::snprintf(buf, sizeof(buf), ",%.9g", d[b * width + c]);
        out.append(buf, static_cast<std::size_t>(n));
      }
      out += "\n";
    }
  }
  return out;
}

ReconstructionResult export_reconstruction(const Model<float>& model, const PointCloud& cloud, std::uint64_t seed,
                                           const std::string& path) {
  nd::NoGradGuard ng;
  const auto& mc = model.config();
  const PointCloud norm = normalize(cloud);
  const PatchSet ps = make_patches(norm, mc.num_patches, mc.patch_k, mix_seed(seed, 1));
  const MaskPlan plan = make_mask(mc.num_patches, mc.mask_ratio, mix_seed(seed, 2));
  const PatchSet* batch[] = {&ps};
  const MaskPlan plans[] = {plan};
  auto enc = model.encode(batch, plans);
  auto recon = model.decode(enc, batch, plans);
  auto target = masked_patch_targets<float>(batch, plans);

  ReconstructionResult r;
  r.ground_truth = norm.points;
  r.masked = plan.masked.size();
  const std::size_t k = mc.patch_k;
  for (std::size_t g : plan.visible)
    for (std::size_t j = 0; j < k; ++j) r.visible.push_back(norm.points[ps.source_indices[g * k + j]]);
  auto rd = recon.data();
  auto td = target.data();
  double chamfer = 0.0;
  for (std::size_t m = 0; m < plan.masked.size(); ++m) {
    const auto& c = ps.centers[plan.masked[m]];
    std::vector<Point3> rel_r(k), rel_t(k);
    for (std::size_t j = 0; j < k; ++j) {
      for (int a = 0; a < 3; ++a) {
        rel_r[j][a] = rd[(m * k + j) * 3 + a];
        rel_t[j][a] = td[(m * k + j) * 3 + a];
      }
      r.reconstructed.push_back({rel_r[j][0] + c[0], rel_r[j][1] + c[1], rel_r[j][2] + c[2]});
      r.target.push_back({rel_t[j][0] + c[0], rel_t[j][1] + c[1], rel_t[j][2] + c[2]});
    }
    chamfer += chamfer_l2(rel_r, rel_t);
  }
  r.chamfer = chamfer / static_cast<double>(plan.masked.size());
  if (!path.empty()) save_pmtp_sections(path, {r.ground_truth, r.visible, r.reconstructed});
  return r;
}

}  // namespace pmt
