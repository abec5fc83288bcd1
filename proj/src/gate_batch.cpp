#include <algorithm>
#include <cmath>
#include <cstddef>

#include "gate_forward.hpp"
#include "moedet/errors.hpp"

namespace moedet::detail {

namespace {

bool has_conv(const GateParams& p) {
  return p.arch == GateArch::conv_fc2 || p.arch == GateArch::conv2_fc2;
}

void conv_forward(const ConvLayer& layer, const Volume& in, Volume& out) {
  const int k = layer.kernel;
  const int pad = k / 2;
  out = Volume::zeros(layer.out_c, in.height, in.width);
  for (int o = 0; o < layer.out_c; ++o) {
    for (int y = 0; y < in.height; ++y) {
      for (int x = 0; x < in.width; ++x) {
        double acc = layer.b[o];
        for (int i = 0; i < layer.in_c; ++i) {
          for (int dy = 0; dy < k; ++dy) {
            const int sy = y + dy - pad;
            if (sy < 0 || sy >= in.height) continue;
            for (int dx = 0; dx < k; ++dx) {
              const int sx = x + dx - pad;
              if (sx < 0 || sx >= in.width) continue;
              acc += layer.w[static_cast<std::size_t>(((o * layer.in_c + i) * k + dy)) * k + dx] *
                     in.at(i, sy, sx);
            }
          }
        }
        out.at(o, y, x) = acc;
      }
    }
  }
}

// dOut -> (dW, dB) accumulation and dIn.
void conv_backward(const ConvLayer& layer, const Volume& in, const Volume& d_out,
                   ConvLayer& grad, Volume* d_in) {
  const int k = layer.kernel;
  const int pad = k / 2;
  for (int o = 0; o < layer.out_c; ++o) {
    for (int y = 0; y < in.height; ++y) {
      for (int x = 0; x < in.width; ++x) {
        const double g = d_out.at(o, y, x);
        if (g == 0.0) continue;
        grad.b[o] += g;
        for (int i = 0; i < layer.in_c; ++i) {
          for (int dy = 0; dy < k; ++dy) {
            const int sy = y + dy - pad;
            if (sy < 0 || sy >= in.height) continue;
            for (int dx = 0; dx < k; ++dx) {
              const int sx = x + dx - pad;
              if (sx < 0 || sx >= in.width) continue;
              const std::size_t wi =
                  static_cast<std::size_t>(((o * layer.in_c + i) * k + dy)) * k + dx;
              grad.w[wi] += g * in.at(i, sy, sx);
              if (d_in != nullptr) d_in->at(i, sy, sx) += g * layer.w[wi];
            }
          }
        }
      }
    }
  }
}

// Population mean/variance per channel over every sample and spatial cell.
BnBatchStats bn_batch_stats(const std::vector<const Volume*>& vols, int channels) {
  BnBatchStats s;
  s.mean.assign(channels, 0.0);
  s.var.assign(channels, 0.0);
  std::size_t count = 0;
  for (const Volume* v : vols) count += static_cast<std::size_t>(v->height) * v->width;
  for (int c = 0; c < channels; ++c) {
    double sum = 0.0;
    for (const Volume* v : vols)
      for (int y = 0; y < v->height; ++y)
        for (int x = 0; x < v->width; ++x) sum += v->at(c, y, x);
    const double mean = sum / static_cast<double>(count);
    double sq = 0.0;
    for (const Volume* v : vols)
      for (int y = 0; y < v->height; ++y)
        for (int x = 0; x < v->width; ++x) {
          const double d = v->at(c, y, x) - mean;
          sq += d * d;
        }
    s.mean[c] = mean;
    s.var[c] = sq / static_cast<double>(count);
  }
  return s;
}

// x-hat = (x - mean) / sqrt(var + eps); out = gamma * x-hat + beta.
void bn_apply(const BatchNormLayer& bn, const std::vector<double>& mean,
              const std::vector<double>& var, const Volume& in, Volume& norm, Volume& out) {
  norm = Volume::zeros(in.channels, in.height, in.width);
  out = Volume::zeros(in.channels, in.height, in.width);
  for (int c = 0; c < in.channels; ++c) {
    const double inv_std = 1.0 / std::sqrt(var[c] + GateParams::kBnEps);
    for (int y = 0; y < in.height; ++y) {
      for (int x = 0; x < in.width; ++x) {
        const double xhat = (in.at(c, y, x) - mean[c]) * inv_std;
        norm.at(c, y, x) = xhat;
        out.at(c, y, x) = bn.gamma[c] * xhat + bn.beta[c];
      }
    }
  }
}

void relu_inplace(Volume& v) {
  for (double& x : v.data) x = x > 0.0 ? x : 0.0;
}

std::vector<double> dense_forward(const DenseLayer& l, const double* in) {
  std::vector<double> out(l.out_dim);
  for (int o = 0; o < l.out_dim; ++o) {
    double acc = l.b[o];
    const double* row = &l.w[static_cast<std::size_t>(o) * l.in_dim];
    for (int i = 0; i < l.in_dim; ++i) acc += row[i] * in[i];
    out[o] = acc;
  }
  return out;
}

void dense_backward(const DenseLayer& l, const double* in, const double* d_out,
                    DenseLayer& grad, double* d_in) {
  for (int o = 0; o < l.out_dim; ++o) {
    const double g = d_out[o];
    grad.b[o] += g;
    const double* row = &l.w[static_cast<std::size_t>(o) * l.in_dim];
    double* grow = &grad.w[static_cast<std::size_t>(o) * l.in_dim];
    for (int i = 0; i < l.in_dim; ++i) {
      grow[i] += g * in[i];
      if (d_in != nullptr) d_in[i] += g * row[i];
    }
  }
}

// Returns the per-sample trunk output this architecture feeds to the heads.
const Volume& trunk_output(const GateParams& params, const FeatureMap& features,
                           const SampleTrace& t) {
  switch (params.arch) {
    case GateArch::fc1:
    case GateArch::fc2: return features.data;
    case GateArch::conv_fc2: return t.act1;
    case GateArch::conv2_fc2: return t.act2;
  }
  return features.data;
}

void check_features(const GateParams& params, const FeatureMap& features) {
  if (features.data.channels != params.in_channels)
    throw ConfigError("gate_forward: feature map has " +
                      std::to_string(features.data.channels) + " channels, gate expects " +
                      std::to_string(params.in_channels));
  if (features.data.height < 1 || features.data.width < 1)
    throw ConfigError("gate_forward: empty feature map");
  if (params.mode == GateMode::classwise && params.class_count < 1)
    throw ConfigError("gate_forward: classwise mode requires class_count");
}

}  // namespace

int cell_count(const GateParams& params, const FeatureMap& features) {
  return params.mode == GateMode::spatial ? features.data.height * features.data.width : 1;
}

void gate_forward_batch(const GateParams& params, const std::vector<const FeatureMap*>& batch,
                        bool training, BatchTrace& trace) {
  trace.samples.assign(batch.size(), SampleTrace{});
  for (const FeatureMap* f : batch) check_features(params, *f);

  // Trunk, staged across the batch so batch-norm sees joint statistics.
  if (has_conv(params)) {
    for (std::size_t s = 0; s < batch.size(); ++s)
      conv_forward(params.conv1, batch[s]->data, trace.samples[s].conv1_pre);
    if (params.arch == GateArch::conv_fc2) {
      for (SampleTrace& t : trace.samples) {
        t.act1 = t.conv1_pre;
        relu_inplace(t.act1);
      }
    } else {
      std::vector<const Volume*> pre1;
      for (SampleTrace& t : trace.samples) pre1.push_back(&t.conv1_pre);
      if (training) {
        trace.bn1 = bn_batch_stats(pre1, params.bn1.channels);
      } else {
        trace.bn1 = {params.bn1.running_mean, params.bn1.running_var};
      }
      for (SampleTrace& t : trace.samples) {
        bn_apply(params.bn1, trace.bn1.mean, trace.bn1.var, t.conv1_pre, t.bn1_norm, t.act1);
        relu_inplace(t.act1);
      }
      for (SampleTrace& t : trace.samples) conv_forward(params.conv2, t.act1, t.conv2_pre);
      std::vector<const Volume*> pre2;
      for (SampleTrace& t : trace.samples) pre2.push_back(&t.conv2_pre);
      if (training) {
        trace.bn2 = bn_batch_stats(pre2, params.bn2.channels);
      } else {
        trace.bn2 = {params.bn2.running_mean, params.bn2.running_var};
      }
      for (SampleTrace& t : trace.samples) {
        bn_apply(params.bn2, trace.bn2.mean, trace.bn2.var, t.conv2_pre, t.bn2_norm, t.act2);
        relu_inplace(t.act2);
      }
    }
  }

  // Heads.
  for (std::size_t s = 0; s < batch.size(); ++s) {
    SampleTrace& t = trace.samples[s];
    const Volume& trunk = trunk_output(params, *batch[s], t);
    const int trunk_dim = trunk.channels;
    const int cells = cell_count(params, *batch[s]);
    const int n = params.expert_count;
    const int head_count = static_cast<int>(params.heads.size());

    if (params.mode != GateMode::spatial) {
      t.pooled.assign(trunk_dim, 0.0);
      const double inv = 1.0 / (static_cast<double>(trunk.height) * trunk.width);
      for (int c = 0; c < trunk_dim; ++c) {
        double acc = 0.0;
        for (int y = 0; y < trunk.height; ++y)
          for (int x = 0; x < trunk.width; ++x) acc += trunk.at(c, y, x);
        t.pooled[c] = acc * inv;
      }
    }

    t.hidden_pre.assign(head_count, {});
    t.hidden_act.assign(head_count, {});
    t.logits.assign(head_count, {});

    GateOutput& out = t.output;
    out.mode = params.mode;
    out.expert_count = n;
    if (params.mode == GateMode::single) {
      out.single.assign(n, 0.0);
    } else if (params.mode == GateMode::spatial) {
      out.grid_h = trunk.height;
      out.grid_w = trunk.width;
      out.spatial.assign(static_cast<std::size_t>(cells) * n, 0.0);
    } else {
      out.class_count = params.class_count;
      out.classwise.assign(static_cast<std::size_t>(params.class_count + 1) * n, 0.0);
    }

    std::vector<double> cell_vec(trunk_dim);
    for (int h = 0; h < head_count; ++h) {
      const GateHead& head = params.heads[h];
      const bool hidden = head.hidden.out_dim > 0;
      if (hidden) {
        t.hidden_pre[h].assign(static_cast<std::size_t>(cells) * params.hidden_dim, 0.0);
        t.hidden_act[h].assign(static_cast<std::size_t>(cells) * params.hidden_dim, 0.0);
      }
      t.logits[h].assign(static_cast<std::size_t>(cells) * n, 0.0);
      for (int cell = 0; cell < cells; ++cell) {
        const double* v;
        if (params.mode == GateMode::spatial) {
          const int y = cell / trunk.width;
          const int x = cell % trunk.width;
          for (int c = 0; c < trunk_dim; ++c) cell_vec[c] = trunk.at(c, y, x);
          v = cell_vec.data();
        } else {
          v = t.pooled.data();
        }
        std::vector<double> z;
        if (hidden) {
          std::vector<double> hp = dense_forward(head.hidden, v);
          std::vector<double> ha = hp;
          for (double& x : ha) x = x > 0.0 ? x : 0.0;
          std::copy(hp.begin(), hp.end(),
                    t.hidden_pre[h].begin() + static_cast<std::size_t>(cell) * params.hidden_dim);
          std::copy(ha.begin(), ha.end(),
                    t.hidden_act[h].begin() + static_cast<std::size_t>(cell) * params.hidden_dim);
          z = dense_forward(head.out, ha.data());
        } else {
          z = dense_forward(head.out, v);
        }
        std::copy(z.begin(), z.end(),
                  t.logits[h].begin() + static_cast<std::size_t>(cell) * n);
        const std::vector<double> w = softmax(z);
        if (params.mode == GateMode::single) {
          out.single = w;
        } else if (params.mode == GateMode::spatial) {
          std::copy(w.begin(), w.end(), out.spatial.begin() + static_cast<std::size_t>(cell) * n);
        } else {
          std::copy(w.begin(), w.end(),
                    out.classwise.begin() + static_cast<std::size_t>(h) * n);
        }
      }
    }
  }
}

void gate_backward_batch(const GateParams& params, const std::vector<const FeatureMap*>& batch,
                         const BatchTrace& trace, const std::vector<GateOutput>& d_outputs,
                         GateParams& grad) {
  const int n = params.expert_count;
  const int head_count = static_cast<int>(params.heads.size());
  const bool conv = has_conv(params);

  // dLoss/d(trunk output) per sample, filled by the head backward below and
  // consumed by the trunk backward (which couples samples through batch norm).
  std::vector<Volume> d_trunk(batch.size());

  for (std::size_t s = 0; s < batch.size(); ++s) {
    const SampleTrace& t = trace.samples[s];
    const Volume& trunk = trunk_output(params, *batch[s], t);
    const int trunk_dim = trunk.channels;
    const int cells = cell_count(params, *batch[s]);
    if (conv) d_trunk[s] = Volume::zeros(trunk.channels, trunk.height, trunk.width);

    std::vector<double> d_pooled(trunk_dim, 0.0);
    std::vector<double> cell_vec(trunk_dim);
    std::vector<double> d_cell(trunk_dim);

    for (int h = 0; h < head_count; ++h) {
      const GateHead& head = params.heads[h];
      GateHead& ghead = grad.heads[h];
      const bool hidden = head.hidden.out_dim > 0;
      for (int cell = 0; cell < cells; ++cell) {
        // dL/dw for this head application.
        const double* w;
        const double* dw;
        if (params.mode == GateMode::single) {
          w = t.output.single.data();
          dw = d_outputs[s].single.data();
        } else if (params.mode == GateMode::spatial) {
          w = &t.output.spatial[static_cast<std::size_t>(cell) * n];
          dw = &d_outputs[s].spatial[static_cast<std::size_t>(cell) * n];
        } else {
          w = &t.output.classwise[static_cast<std::size_t>(h) * n];
          dw = &d_outputs[s].classwise[static_cast<std::size_t>(h) * n];
        }
        // Softmax backward: dz_i = w_i (dw_i - sum_j w_j dw_j).
        double dot = 0.0;
        for (int i = 0; i < n; ++i) dot += w[i] * dw[i];
        std::vector<double> dz(n);
        bool all_zero = true;
        for (int i = 0; i < n; ++i) {
          dz[i] = w[i] * (dw[i] - dot);
          if (dz[i] != 0.0) all_zero = false;
        }
        if (all_zero) continue;

        const double* v;
        if (params.mode == GateMode::spatial) {
          const int y = cell / trunk.width;
          const int x = cell % trunk.width;
          for (int c = 0; c < trunk_dim; ++c) cell_vec[c] = trunk.at(c, y, x);
          v = cell_vec.data();
        } else {
          v = t.pooled.data();
        }

        std::fill(d_cell.begin(), d_cell.end(), 0.0);
        if (hidden) {
          const double* ha = &t.hidden_act[h][static_cast<std::size_t>(cell) * params.hidden_dim];
          const double* hp = &t.hidden_pre[h][static_cast<std::size_t>(cell) * params.hidden_dim];
          std::vector<double> dha(params.hidden_dim, 0.0);
          dense_backward(head.out, ha, dz.data(), ghead.out, dha.data());
          for (int i = 0; i < params.hidden_dim; ++i)
            if (hp[i] <= 0.0) dha[i] = 0.0;
          dense_backward(head.hidden, v, dha.data(), ghead.hidden, d_cell.data());
        } else {
          dense_backward(head.out, v, dz.data(), ghead.out, d_cell.data());
        }

        if (params.mode == GateMode::spatial) {
          const int y = cell / trunk.width;
          const int x = cell % trunk.width;
          for (int c = 0; c < trunk_dim; ++c) d_trunk[s].at(c, y, x) += d_cell[c];
        } else {
          for (int c = 0; c < trunk_dim; ++c) d_pooled[c] += d_cell[c];
        }
      }
    }

    if (params.mode != GateMode::spatial && conv) {
      // Mean-pool backward.
      const double inv = 1.0 / (static_cast<double>(trunk.height) * trunk.width);
      for (int c = 0; c < trunk_dim; ++c) {
        const double g = d_pooled[c] * inv;
        if (g == 0.0) continue;
        for (int y = 0; y < trunk.height; ++y)
          for (int x = 0; x < trunk.width; ++x) d_trunk[s].at(c, y, x) += g;
      }
    }
    // fc1/fc2 trunks have no parameters upstream of the heads.
  }

  if (!conv) return;

  if (params.arch == GateArch::conv_fc2) {
    for (std::size_t s = 0; s < batch.size(); ++s) {
      const SampleTrace& t = trace.samples[s];
      Volume d_pre = d_trunk[s];
      for (std::size_t i = 0; i < d_pre.data.size(); ++i)
        if (t.conv1_pre.data[i] <= 0.0) d_pre.data[i] = 0.0;
      conv_backward(params.conv1, batch[s]->data, d_pre, grad.conv1, nullptr);
    }
    return;
  }

  // conv2_fc2: relu -> BN2 -> conv2 -> relu -> BN1 -> conv1, batch-coupled at
  // each BN. BN backward with batch statistics over M elements:
  //   dxhat = dy * gamma
  //   dvar  = -0.5 * sum(dxhat * xhat) * inv_std^2
  //   dmean = -inv_std * sum(dxhat)
  //   dx    = inv_std * dxhat + 2/M * dvar * (x - mean) + dmean / M
  auto bn_backward = [&](const BatchNormLayer& bn, const BnBatchStats& stats,
                         const std::vector<const Volume*>& norm,
                         const std::vector<Volume>& d_out, BatchNormLayer& gbn,
                         std::vector<Volume>& d_in) {
    const int channels = bn.channels;
    std::size_t count = 0;
    for (const Volume* v : norm) count += static_cast<std::size_t>(v->height) * v->width;
    const double m = static_cast<double>(count);
    for (int c = 0; c < channels; ++c) {
      const double inv_std = 1.0 / std::sqrt(stats.var[c] + GateParams::kBnEps);
      double sum_dxhat = 0.0;
      double sum_dxhat_xhat = 0.0;
      for (std::size_t s = 0; s < norm.size(); ++s) {
        for (int y = 0; y < norm[s]->height; ++y) {
          for (int x = 0; x < norm[s]->width; ++x) {
            const double dy = d_out[s].at(c, y, x);
            const double xh = norm[s]->at(c, y, x);
            gbn.gamma[c] += dy * xh;
            gbn.beta[c] += dy;
            const double dxhat = dy * bn.gamma[c];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xh;
          }
        }
      }
      for (std::size_t s = 0; s < norm.size(); ++s) {
        for (int y = 0; y < norm[s]->height; ++y) {
          for (int x = 0; x < norm[s]->width; ++x) {
            const double dy = d_out[s].at(c, y, x);
            const double xh = norm[s]->at(c, y, x);
            const double dxhat = dy * bn.gamma[c];
            d_in[s].at(c, y, x) =
                inv_std * (dxhat - sum_dxhat / m - xh * sum_dxhat_xhat / m);
          }
        }
      }
    }
  };

  const std::size_t B = batch.size();
  // ReLU after BN2: mask by act2 > 0.
  std::vector<Volume> d_bn2_out(B);
  for (std::size_t s = 0; s < B; ++s) {
    const SampleTrace& t = trace.samples[s];
    d_bn2_out[s] = d_trunk[s];
    for (std::size_t i = 0; i < d_bn2_out[s].data.size(); ++i)
      if (t.act2.data[i] <= 0.0) d_bn2_out[s].data[i] = 0.0;
  }
  std::vector<const Volume*> norm2;
  std::vector<Volume> d_conv2_out(B);
  for (std::size_t s = 0; s < B; ++s) {
    norm2.push_back(&trace.samples[s].bn2_norm);
    d_conv2_out[s] =
        Volume::zeros(params.conv2.out_c, d_bn2_out[s].height, d_bn2_out[s].width);
  }
  bn_backward(params.bn2, trace.bn2, norm2, d_bn2_out, grad.bn2, d_conv2_out);

  std::vector<Volume> d_act1(B);
  for (std::size_t s = 0; s < B; ++s) {
    const SampleTrace& t = trace.samples[s];
    d_act1[s] = Volume::zeros(t.act1.channels, t.act1.height, t.act1.width);
    conv_backward(params.conv2, t.act1, d_conv2_out[s], grad.conv2, &d_act1[s]);
  }

  std::vector<Volume> d_bn1_out(B);
  for (std::size_t s = 0; s < B; ++s) {
    const SampleTrace& t = trace.samples[s];
    d_bn1_out[s] = std::move(d_act1[s]);
    for (std::size_t i = 0; i < d_bn1_out[s].data.size(); ++i)
      if (t.act1.data[i] <= 0.0) d_bn1_out[s].data[i] = 0.0;
  }
  std::vector<const Volume*> norm1;
  std::vector<Volume> d_conv1_out(B);
  for (std::size_t s = 0; s < B; ++s) {
    norm1.push_back(&trace.samples[s].bn1_norm);
    d_conv1_out[s] =
        Volume::zeros(params.conv1.out_c, d_bn1_out[s].height, d_bn1_out[s].width);
  }
  bn_backward(params.bn1, trace.bn1, norm1, d_bn1_out, grad.bn1, d_conv1_out);

  for (std::size_t s = 0; s < B; ++s)
    conv_backward(params.conv1, batch[s]->data, d_conv1_out[s], grad.conv1, nullptr);
}

std::vector<double> bilinear_resample_adjoint(const std::vector<double>& d_resampled,
                                              int target_h, int target_w, int vec_dim,
                                              int grid_h, int grid_w) {
  std::vector<double> d_grid(static_cast<std::size_t>(grid_h) * grid_w * vec_dim, 0.0);
  for (int oy = 0; oy < target_h; ++oy) {
    const double sy = (oy + 0.5) * static_cast<double>(grid_h) / target_h - 0.5;
    const int y0 = static_cast<int>(std::floor(sy));
    const double fy = sy - y0;
    const int y0c = std::clamp(y0, 0, grid_h - 1);
    const int y1c = std::clamp(y0 + 1, 0, grid_h - 1);
    for (int ox = 0; ox < target_w; ++ox) {
      const double sx = (ox + 0.5) * static_cast<double>(grid_w) / target_w - 0.5;
      const int x0 = static_cast<int>(std::floor(sx));
      const double fx = sx - x0;
      const int x0c = std::clamp(x0, 0, grid_w - 1);
      const int x1c = std::clamp(x0 + 1, 0, grid_w - 1);
      const double* src = &d_resampled[static_cast<std::size_t>((oy * target_w + ox)) * vec_dim];
      const double w00 = (1.0 - fy) * (1.0 - fx);
      const double w01 = (1.0 - fy) * fx;
      const double w10 = fy * (1.0 - fx);
      const double w11 = fy * fx;
      for (int d = 0; d < vec_dim; ++d) {
        d_grid[static_cast<std::size_t>((y0c * grid_w + x0c)) * vec_dim + d] += w00 * src[d];
        d_grid[static_cast<std::size_t>((y0c * grid_w + x1c)) * vec_dim + d] += w01 * src[d];
        d_grid[static_cast<std::size_t>((y1c * grid_w + x0c)) * vec_dim + d] += w10 * src[d];
        d_grid[static_cast<std::size_t>((y1c * grid_w + x1c)) * vec_dim + d] += w11 * src[d];
      }
    }
  }
  return d_grid;
}

}  // namespace moedet::detail
