#include "rrlab/bn_eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "rrlab/ops.hpp"

namespace rrlab {

std::string_view protocol_name(Protocol p) {
  switch (p) {
    case Protocol::Error2: return "error2";
    case Protocol::Error3: return "error3";
    case Protocol::Error4: return "error4";
  }
  return "?";
}

Protocol parse_protocol(std::string_view name) {
  if (name == "error2") return Protocol::Error2;
  if (name == "error3") return Protocol::Error3;
  if (name == "error4") return Protocol::Error4;
  throw std::invalid_argument("unknown protocol '" + std::string(name) + "' (expected error2, error3 or error4)");
}

Protocol default_protocol(bool zca, bool augmentation) {
  return zca && augmentation ? Protocol::Error4 : Protocol::Error3;
}

void RefreshPlan::validate() const {
  if (batch_size == 0 || passes == 0) throw std::invalid_argument("refresh: batch size and pass count must be positive");
  if (protocol == Protocol::Error3 && passes % 2 != 0) throw std::invalid_argument("refresh: error3 needs an even pass count");
  if (!(momentum > 0.0 && momentum <= 1.0)) throw std::invalid_argument("refresh: momentum must lie in (0, 1]");
}

namespace {

std::vector<std::size_t> draw_batch(std::size_t population, std::size_t count, bool with_replacement, Rng& rng) {
  std::vector<std::size_t> idx(count);
  if (with_replacement) {
    std::uniform_int_distribution<std::size_t> pick(0, population - 1);
    for (auto& i : idx) i = pick(rng);
    return idx;
  }
  std::vector<std::size_t> all(population);
  std::iota(all.begin(), all.end(), std::size_t{0});
  for (std::size_t i = 0; i < count; ++i) {
    std::swap(all[i], all[std::uniform_int_distribution<std::size_t>(i, population - 1)(rng)]);
  }
  std::copy_n(all.begin(), count, idx.begin());
  return idx;
}

std::vector<ad::BatchStats<float>> batch_statistics(const ModelState<float>& model, const Tensor<float>& x) {
  ForwardOptions o;
  o.training = true;
  o.dropout = false;
  ad::Tape<float> tape;
  const BoundModel<float> b = bind_model(model, tape, false);
  std::vector<ad::BatchStats<float>> stats;
  forward_logits(model, b, tape.constant(x), o, &stats);
  return stats;
}

}  // namespace

RefreshReport refresh_bn(ModelState<float>& model, const RefreshPlan& plan, const Dataset& labeled,
                         const RefreshInputs& inputs) {
  plan.validate();
  if (labeled.size() == 0) throw std::invalid_argument("refresh: D_L is empty");
  if (plan.protocol == Protocol::Error4 && !inputs.augmentation.enabled()) {
    throw std::invalid_argument("refresh: error4 needs an augmentation policy");
  }
  if (plan.protocol == Protocol::Error3 && inputs.pixel_stats.shape != labeled.image_shape()) {
    throw std::invalid_argument("refresh: error3 needs pixel statistics matching the images");
  }
  RefreshReport rep;
  rep.protocol = plan.protocol;
  rep.sampled_with_replacement = labeled.size() < plan.batch_size;
  // Masks come from the trained network as it was before the refresh.
  const ModelState<float> cnn0 = model;
  ForwardOptions mask_opts;
  mask_opts.training = true;
  mask_opts.dropout = false;
  const ProbabilityFn<float> fn = model_probability_fn(cnn0, mask_opts);

  Rng rng(derive_seed(plan.seed, "bn-refresh"));
  Rng noise(derive_seed(plan.seed, "bn-refresh-mask-noise"));
  auto absorb = [&](const Tensor<float>& x) {
    update_running_stats(model, batch_statistics(model, x), plan.momentum);
    ++rep.forward_passes;
  };
  const std::size_t batches = plan.protocol == Protocol::Error3 ? plan.passes / 2 : plan.passes;
  for (std::size_t b = 0; b < batches; ++b) {
    const auto idx = draw_batch(labeled.size(), plan.batch_size, rep.sampled_with_replacement, rng);
    Tensor<float> x = labeled.gather(idx);
    switch (plan.protocol) {
      case Protocol::Error2:
        absorb(x);
        break;
      case Protocol::Error3: {
        std::vector<SensitivityMap> maps = pixel_sensitivity(fn, x);
        Tensor<float> masked(x.shape);
        const std::size_t per = x.size() / x.dim(0);
        for (std::size_t i = 0; i < maps.size(); ++i) {
          block_sensitivity(maps[i], inputs.partition);
          const MaskRegion region = select_mask(maps[i].r2d, inputs.lambda);
          const Tensor<float> m = apply_mask(slice_sample(x, i), region, inputs.partition, inputs.pixel_stats, noise);
          std::copy(m.data.begin(), m.data.end(), masked.data.begin() + static_cast<std::ptrdiff_t>(i * per));
        }
        absorb(x);
        absorb(masked);
        ++rep.masked_batches;
        break;
      }
      case Protocol::Error4:
        absorb(augment_batch(x, inputs.augmentation, rng));
        ++rep.augmented_batches;
        break;
    }
  }
  rep.stats_digest = model.stats_digest();
  return rep;
}

EvalReport evaluate(const ModelState<float>& model, const Dataset& test, Protocol protocol, std::size_t batch) {
  if (!test.has_labels() || test.size() == 0) throw std::invalid_argument("evaluate: labeled, nonempty test set required");
  ForwardOptions eval;
  eval.training = false;
  const std::size_t k = static_cast<std::size_t>(model.spec.classes);
  std::vector<std::size_t> seen(k, 0), wrong(k, 0);
  for (std::size_t start = 0; start < test.size(); start += batch) {
    std::vector<std::size_t> idx(std::min(batch, test.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const Tensor<float> probs = predict(model, test.gather(idx), eval);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const std::uint32_t y = test.labels[idx[i]];
      if (y >= k) throw std::out_of_range("evaluate: label " + std::to_string(y) + " outside model classes");
      const float* p = probs.data.data() + i * k;
      ++seen[y];
      wrong[y] += static_cast<std::size_t>(std::max_element(p, p + k) - p) != y;
    }
  }
  EvalReport rep;
  rep.protocol = protocol;
  rep.samples = test.size();
  rep.stats_digest = model.stats_digest();
  const std::size_t total_wrong = std::accumulate(wrong.begin(), wrong.end(), std::size_t{0});
  rep.error_rate = 100.0 * static_cast<double>(total_wrong) / static_cast<double>(test.size());
  for (std::size_t c = 0; c < k; ++c) {
    rep.per_class_error.push_back(seen[c] ? 100.0 * static_cast<double>(wrong[c]) / static_cast<double>(seen[c])
                                          : std::numeric_limits<double>::quiet_NaN());
  }
  return rep;
}

}  // namespace rrlab
