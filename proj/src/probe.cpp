#include "mjlab/probe.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "mjlab/rng.hpp"

namespace mjlab {

std::string PositionSelector::name() const {
  switch (kind) {
    case SelectorKind::Absolute:
      return "abs:" + std::to_string(index);
    case SelectorKind::OffsetFromEnd:
      return "end:" + std::to_string(index);
    case SelectorKind::Mean:
      return "mean";
    case SelectorKind::Max:
      return "max";
    case SelectorKind::Last:
      return "last";
  }
  return "?";
}

PositionSelector PositionSelector::parse(const std::string& text) {
  if (text == "mean") return {SelectorKind::Mean, 0};
  if (text == "max") return {SelectorKind::Max, 0};
  if (text == "last") return {SelectorKind::Last, 0};
  const auto colon = text.find(':');
  if (colon != std::string::npos) {
    const std::string head = text.substr(0, colon), tail = text.substr(colon + 1);
    if (!tail.empty() && std::all_of(tail.begin(), tail.end(), ::isdigit)) {
      const auto idx = static_cast<std::size_t>(std::stoull(tail));
      if (head == "abs") return {SelectorKind::Absolute, idx};
      if (head == "end") return {SelectorKind::OffsetFromEnd, idx};
    }
  }
  throw std::invalid_argument("unknown position selector '" + text + "'");
}

std::vector<Tensor> probe_features(const Backbone& model, const Dataset& data, std::size_t layer,
                                   const std::vector<PositionSelector>& selectors) {
  const std::size_t d = model.config().d_model;
  if (layer > model.config().n_layers) throw std::out_of_range("probe: layer index out of range");
  for (const auto& ex : data)
    for (const auto& sel : selectors) {
      const std::size_t len = ex.tokens.size();
      if ((sel.kind == SelectorKind::Absolute || sel.kind == SelectorKind::OffsetFromEnd) && sel.index >= len)
        throw std::out_of_range("probe: selector " + sel.name() + " does not fit a sequence of length " +
                                std::to_string(len));
    }

  std::vector<std::vector<double>> out(selectors.size(), std::vector<double>(data.size() * d));
  constexpr std::size_t kChunk = 32;
  const auto n_chunks = static_cast<std::ptrdiff_t>((data.size() + kChunk - 1) / kChunk);
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t c = 0; c < n_chunks; ++c) {
    NoGradGuard guard;
    const std::size_t lo = static_cast<std::size_t>(c) * kChunk, hi = std::min(data.size(), lo + kChunk);
    std::vector<std::vector<int>> batch;
    for (std::size_t i = lo; i < hi; ++i) batch.push_back(data[i].tokens);
    const PackedSequences packed = PackedSequences::pack(batch);
    const Tensor h = model.forward(packed).hidden[layer];
    const auto hd = h.data();
    for (std::size_t i = lo; i < hi; ++i) {
      const std::size_t base = packed.offsets[i - lo], len = packed.length(i - lo);
      for (std::size_t s = 0; s < selectors.size(); ++s) {
        double* dst = out[s].data() + i * d;
        const auto& sel = selectors[s];
        auto row = [&](std::size_t pos) { return hd.data() + (base + pos) * d; };
        switch (sel.kind) {
          case SelectorKind::Absolute:
            std::copy_n(row(sel.index), d, dst);
            break;
          case SelectorKind::OffsetFromEnd:
            std::copy_n(row(len - 1 - sel.index), d, dst);
            break;
          case SelectorKind::Last:
            std::copy_n(row(len - 1), d, dst);
            break;
          case SelectorKind::Mean:
            for (std::size_t p = 0; p < len; ++p)
              for (std::size_t j = 0; j < d; ++j) dst[j] += row(p)[j];
            for (std::size_t j = 0; j < d; ++j) dst[j] /= static_cast<double>(len);
            break;
          case SelectorKind::Max:
            std::fill_n(dst, d, -std::numeric_limits<double>::infinity());
            for (std::size_t p = 0; p < len; ++p)
              for (std::size_t j = 0; j < d; ++j) dst[j] = std::max(dst[j], row(p)[j]);
            break;
        }
      }
    }
  }
  std::vector<Tensor> res;
  for (auto& v : out) res.push_back(Tensor::matrix(data.size(), d, std::move(v)));
  return res;
}

namespace {

double accuracy(const std::vector<double>& x, const std::vector<int>& y, const std::vector<double>& w,
                const std::vector<double>& b, std::size_t d, std::size_t classes) {
  std::size_t hit = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    std::size_t best = 0;
    double best_z = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < classes; ++c) {
      double z = b[c];
      for (std::size_t j = 0; j < d; ++j) z += w[c * d + j] * x[i * d + j];
      if (z > best_z) best_z = z, best = c;
    }
    hit += static_cast<int>(best) == y[i];
  }
  return static_cast<double>(hit) / static_cast<double>(y.size());
}

}  // namespace

ProbeResult fit_linear_probe(const Tensor& x_train, const std::vector<int>& y_train, const Tensor& x_val,
                             const std::vector<int>& y_val, std::size_t classes, std::size_t epochs, double lr,
                             std::uint64_t seed) {
  if (y_train.empty() || y_val.empty()) throw std::invalid_argument("probe: empty train or validation split");
  if (x_train.rows() != y_train.size() || x_val.rows() != y_val.size() || x_train.cols() != x_val.cols())
    throw ShapeError("probe: features and labels disagree");
  for (auto y : y_train)
    if (y < 0 || static_cast<std::size_t>(y) >= classes) throw std::invalid_argument("probe: label out of range");
  const std::size_t n = y_train.size(), d = x_train.cols();

  // Standardise with training statistics.
  std::vector<double> mu(d, 0.0), sd(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) mu[j] += x_train.at(i, j);
  for (auto& m : mu) m /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) sd[j] += (x_train.at(i, j) - mu[j]) * (x_train.at(i, j) - mu[j]);
  for (auto& s : sd) s = std::sqrt(s / static_cast<double>(n)) + 1e-8;
  auto standardise = [&](const Tensor& x) {
    std::vector<double> z(x.numel());
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t j = 0; j < d; ++j) z[i * d + j] = (x.at(i, j) - mu[j]) / sd[j];
    return z;
  };
  const auto xt = standardise(x_train), xv = standardise(x_val);

  Rng rng(seed);
  std::vector<double> w = rng.normals(classes * d, 0.01), b(classes, 0.0);
  std::vector<double> gw(w.size()), gb(classes), z(classes);
  for (std::size_t e = 0; e < epochs; ++e) {
    std::fill(gw.begin(), gw.end(), 0.0);
    std::fill(gb.begin(), gb.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      double top = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < classes; ++c) {
        z[c] = b[c];
        for (std::size_t j = 0; j < d; ++j) z[c] += w[c * d + j] * xt[i * d + j];
        top = std::max(top, z[c]);
      }
      double total = 0.0;
      for (auto& v : z) total += (v = std::exp(v - top));
      for (std::size_t c = 0; c < classes; ++c) {
        const double g = z[c] / total - (static_cast<int>(c) == y_train[i] ? 1.0 : 0.0);
        gb[c] += g;
        for (std::size_t j = 0; j < d; ++j) gw[c * d + j] += g * xt[i * d + j];
      }
    }
    const double step = lr / static_cast<double>(n);
    for (std::size_t k = 0; k < w.size(); ++k) w[k] -= step * gw[k];
    for (std::size_t c = 0; c < classes; ++c) b[c] -= step * gb[c];
  }
  return {accuracy(xt, y_train, w, b, d, classes), accuracy(xv, y_val, w, b, d, classes)};
}

ProbeResult run_probe(const ProbeSpec& spec, const Backbone& model, const Dataset& data) {
  const auto [train, val] = split_dataset(data, spec.val_fraction, spec.seed);
  if (train.empty() || val.empty()) throw std::invalid_argument("probe: empty train or validation split");
  const Tensor ft = probe_features(model, train, spec.layer, {spec.selector}).front();
  const Tensor fv = probe_features(model, val, spec.layer, {spec.selector}).front();
  std::vector<int> yt, yv;
  int top = 0;
  for (const auto& ex : train) yt.push_back(ex.label), top = std::max(top, ex.label);
  for (const auto& ex : val) yv.push_back(ex.label), top = std::max(top, ex.label);
  return fit_linear_probe(ft, yt, fv, yv, static_cast<std::size_t>(top) + 1, spec.epochs, spec.lr,
                          derive_seed(spec.seed, {11}));
}

std::vector<ProbeRow> probe_sweep(const Backbone& model, const Dataset& data, const std::vector<std::size_t>& layers,
                                  const std::vector<PositionSelector>& selectors,
                                  const std::vector<std::uint64_t>& seeds, std::size_t epochs, double lr,
                                  double val_fraction) {
  // Tag each example with its index so splits can be mapped back to feature rows.
  Dataset tagged = data;
  for (std::size_t i = 0; i < tagged.size(); ++i) tagged[i].tokens.push_back(static_cast<int>(i));
  int top = 0;
  for (const auto& ex : data) top = std::max(top, ex.label);
  const auto classes = static_cast<std::size_t>(top) + 1;

  std::vector<ProbeRow> rows;
  for (auto layer : layers) {
    const auto feats = probe_features(model, data, layer, selectors);
    for (auto seed : seeds) {
      const auto [train, val] = split_dataset(tagged, val_fraction, seed);
      if (train.empty() || val.empty()) throw std::invalid_argument("probe: empty train or validation split");
      std::vector<std::size_t> ti, vi;
      std::vector<int> yt, yv;
      for (const auto& ex : train) ti.push_back(static_cast<std::size_t>(ex.tokens.back())), yt.push_back(ex.label);
      for (const auto& ex : val) vi.push_back(static_cast<std::size_t>(ex.tokens.back())), yv.push_back(ex.label);
      for (std::size_t s = 0; s < selectors.size(); ++s) {
        NoGradGuard guard;
        const ProbeResult r = fit_linear_probe(index_rows(feats[s], ti), yt, index_rows(feats[s], vi), yv, classes,
                                               epochs, lr, derive_seed(seed, {11}));
        rows.push_back({layer, selectors[s].name(), seed, r});
      }
    }
  }
  return rows;
}

std::vector<PositionSelector> position_ladder(std::size_t length) {
  if (length < 4) throw std::invalid_argument("position ladder needs sequences of at least 4 tokens");
  const std::size_t q = length / 4;
  return {{SelectorKind::Absolute, 0},         {SelectorKind::OffsetFromEnd, 3 * q}, {SelectorKind::OffsetFromEnd, 2 * q},
          {SelectorKind::OffsetFromEnd, q},    {SelectorKind::Last, 0},              {SelectorKind::Mean, 0},
          {SelectorKind::Max, 0}};
}

void write_probe_csv(const std::vector<ProbeRow>& rows, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "layer,selector,seed,train_acc,val_acc\n";
  out.precision(6);
  for (const auto& r : rows)
    out << r.layer << ',' << r.selector << ',' << r.seed << ',' << r.result.train_acc << ',' << r.result.val_acc
        << '\n';
}

}  // namespace mjlab
