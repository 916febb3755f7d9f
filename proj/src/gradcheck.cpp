#include "sizefit/gradcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "sizefit/losses.hpp"
#include "sizefit/nn.hpp"

namespace sizefit::gradcheck {

using tensor::Shape;

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), kErrorFloor});
  return std::abs(analytic - numeric) / denom;
}

namespace {

class PrecisionScope {
 public:
  PrecisionScope() : saved_(tensor::compute_precision()) { tensor::set_compute_precision(tensor::Precision::f64); }
  ~PrecisionScope() { tensor::set_compute_precision(saved_); }
  PrecisionScope(const PrecisionScope&) = delete;
  PrecisionScope& operator=(const PrecisionScope&) = delete;

 private:
  tensor::Precision saved_;
};

Var weighted_sum(Tape& tape, Var out, const Tensor& w) { return tensor::sum(tensor::mul(out, tape.constant(w))); }

Tensor random_weights(const Shape& shape, Rng& rng) {
  Tensor w(shape);
  for (double& v : w.values()) v = rng.uniform(-1.0, 1.0);
  return w;
}

// Visits a random subset of at most max_coords indices in [0, n).
std::vector<std::size_t> pick_coords(std::size_t n, int max_coords, Rng& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  idx.resize(std::min(n, static_cast<std::size_t>(max_coords)));
  return idx;
}

// Compares one coordinate; eval(delta) returns the loss with that
// coordinate shifted by delta.
template <typename Eval>
void probe_coord(double analytic, double base, const Eval& eval, const Options& opt, Probe& p) {
  const double h = opt.step;
  const double lp = eval(h), lm = eval(-h);
  const double right = (lp - base) / h, left = (base - lm) / h;
  // A kink between x - h and x + h makes the one-sided slopes disagree by
  // far more than the h * f'' of a smooth function.
  // The threshold keeps any undetected kink's effect on the central
  // difference well under the suite tolerance.
  if (std::abs(right - left) > 5e-5 * std::max({kErrorFloor, std::abs(right), std::abs(left)})) {
    ++p.kinks;
    return;
  }
  p.max_rel_error = std::max(p.max_rel_error, relative_error(analytic, (lp - lm) / (2.0 * h)));
  ++p.coords;
}

Tensor uniform(Shape shape, Rng& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

// Magnitudes in [lo, hi] with a random sign: keeps kinked ops away from 0.
Tensor signed_away(Shape shape, Rng& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(lo, hi);
  return t;
}

Tensor binary(Shape shape, Rng& rng, double p = 0.4) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.uniform() < p ? 1.0 : 0.0;
  return t;
}

std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }

struct Case {
  std::string name;
  std::function<Probe(Rng&, const Options&)> run;
};

Case op_case(std::string name, std::function<std::vector<Tensor>(Rng&)> make, Function f,
             std::vector<std::size_t> probed = {}) {
  return {std::move(name),
          [make = std::move(make), f = std::move(f), probed = std::move(probed)](Rng& rng, const Options& opt) {
            return check(f, make(rng), rng, opt, probed);
          }};
}

Shape chw(Rng& rng) { return {pick(rng, 1, 3), pick(rng, 2, 6), pick(rng, 2, 6)}; }

Probe check_params(const std::function<Var(Tape&)>& loss, nn::ParameterStore& store, Rng& rng, const Options& opt) {
  Tape tape;
  const Var l = loss(tape);
  tape.backward(l);
  const double base = l.value().item();
  std::vector<Tensor> grads(store.size());
  for (std::size_t i = 0; i < store.size(); ++i) grads[i] = Tensor(store.tensor(i).shape());
  tape.for_each_parameter_grad(&store, [&](std::size_t i, const Tensor& g) { grads[i] = g; });

  Probe p;
  for (std::size_t i = 0; i < store.size(); ++i) {
    Tensor& t = store.tensor(i);
    for (std::size_t k : pick_coords(t.size(), std::max(2, opt.max_coords / 4), rng)) {
      const double saved = t[k];
      const auto eval = [&](double d) {
        t[k] = saved + d;
        Tape fresh;
        const double v = loss(fresh).value().item();
        t[k] = saved;
        return v;
      };
      probe_coord(grads[i][k], base, eval, opt, p);
    }
  }
  return p;
}

std::vector<Case> build_cases() {
  using namespace tensor;
  std::vector<Case> cases;
  const auto same2 = [](Rng& r) {
    const Shape s = chw(r);
    return std::vector<Tensor>{uniform(s, r, -1, 1), uniform(s, r, -1, 1)};
  };
  const auto one = [](double lo, double hi) {
    return [lo, hi](Rng& r) { return std::vector<Tensor>{uniform(chw(r), r, lo, hi)}; };
  };
  const auto kinked = [](Rng& r) { return std::vector<Tensor>{signed_away(chw(r), r, 0.05, 1.5)}; };

  cases.push_back(op_case("add", same2, [](Tape&, const std::vector<Var>& v) { return add(v[0], v[1]); }));
  cases.push_back(op_case("sub", same2, [](Tape&, const std::vector<Var>& v) { return sub(v[0], v[1]); }));
  cases.push_back(op_case("mul", same2, [](Tape&, const std::vector<Var>& v) { return mul(v[0], v[1]); }));
  cases.push_back(op_case(
      "div",
      [](Rng& r) {
        const Shape s = chw(r);
        return std::vector<Tensor>{uniform(s, r, -1, 1), signed_away(s, r, 0.5, 2.0)};
      },
      [](Tape&, const std::vector<Var>& v) { return div(v[0], v[1]); }));
  cases.push_back(op_case(
      "mul_channel_broadcast",
      [](Rng& r) {
        const Shape s = chw(r);
        return std::vector<Tensor>{uniform(s, r, -1, 1), uniform({s[0]}, r, -1, 1)};
      },
      [](Tape&, const std::vector<Var>& v) { return mul(v[0], v[1]); }));
  cases.push_back(op_case(
      "add_scalar_broadcast",
      [](Rng& r) { return std::vector<Tensor>{uniform(chw(r), r, -1, 1), uniform({1}, r, -1, 1)}; },
      [](Tape&, const std::vector<Var>& v) { return add(v[1], v[0]); }));
  cases.push_back(op_case("neg", one(-1, 1), [](Tape&, const std::vector<Var>& v) { return neg(v[0]); }));
  cases.push_back(op_case("scale", one(-1, 1), [](Tape&, const std::vector<Var>& v) { return scale(v[0], -1.7); }));
  cases.push_back(
      op_case("add_scalar", one(-1, 1), [](Tape&, const std::vector<Var>& v) { return add_scalar(v[0], 0.3); }));
  cases.push_back(op_case("relu", kinked, [](Tape&, const std::vector<Var>& v) { return relu(v[0]); }));
  cases.push_back(
      op_case("leaky_relu", kinked, [](Tape&, const std::vector<Var>& v) { return leaky_relu(v[0], 0.2); }));
  cases.push_back(op_case("sigmoid", one(-4, 4), [](Tape&, const std::vector<Var>& v) { return sigmoid(v[0]); }));
  cases.push_back(op_case("tanh", one(-3, 3), [](Tape&, const std::vector<Var>& v) { return tanh(v[0]); }));
  cases.push_back(op_case(
      "clamp",
      [](Rng& r) {
        Tensor t = uniform(chw(r), r, -0.45, 1.45);
        for (double& x : t.values())
          if (std::abs(x) < 0.05 || std::abs(x - 1.0) < 0.05) x += 0.1;
        return std::vector<Tensor>{t};
      },
      [](Tape&, const std::vector<Var>& v) { return clamp(v[0], 0.0, 1.0); }));
  cases.push_back(op_case("log", one(0.2, 3), [](Tape&, const std::vector<Var>& v) { return log(v[0]); }));
  cases.push_back(op_case("softplus", one(-5, 5), [](Tape&, const std::vector<Var>& v) { return softplus(v[0]); }));
  cases.push_back(op_case("abs", kinked, [](Tape&, const std::vector<Var>& v) { return abs(v[0]); }));
  cases.push_back(op_case("square", one(-2, 2), [](Tape&, const std::vector<Var>& v) { return square(v[0]); }));
  cases.push_back(op_case("sum", one(-1, 1), [](Tape&, const std::vector<Var>& v) { return sum(v[0]); }));
  cases.push_back(op_case("mean", one(-1, 1), [](Tape&, const std::vector<Var>& v) { return mean(v[0]); }));
  cases.push_back(op_case("reshape", one(-1, 1), [](Tape&, const std::vector<Var>& v) {
    return reshape(v[0], {v[0].value().size()});
  }));
  cases.push_back(op_case(
      "concat_channels",
      [](Rng& r) {
        const std::size_t h = pick(r, 2, 5), w = pick(r, 2, 5);
        return std::vector<Tensor>{uniform({pick(r, 1, 3), h, w}, r, -1, 1), uniform({pick(r, 1, 3), h, w}, r, -1, 1)};
      },
      [](Tape&, const std::vector<Var>& v) { return concat_channels({v[0], v[1]}); }));
  cases.push_back(
      op_case("upsample2x", one(-1, 1), [](Tape&, const std::vector<Var>& v) { return upsample2x(v[0]); }));
  cases.push_back(op_case(
      "dense",
      [](Rng& r) {
        const std::size_t n = pick(r, 1, 8), m = pick(r, 1, 6);
        return std::vector<Tensor>{uniform({n}, r, -1, 1), uniform({m, n}, r, -1, 1), uniform({m}, r, -1, 1)};
      },
      [](Tape&, const std::vector<Var>& v) { return dense(v[0], v[1], v[2]); }));

  struct ConvGeom {
    std::size_t cin, cout, h, w, k;
    int stride, pad;
  };
  const auto conv_geom = [](Rng& r) {
    ConvGeom g;
    g.cin = pick(r, 1, 3);
    g.cout = pick(r, 1, 3);
    g.k = std::array<std::size_t, 3>{1, 3, 4}[r.below(3)];
    g.stride = static_cast<int>(pick(r, 1, 2));
    g.pad = static_cast<int>(r.below(2));
    g.h = pick(r, g.k, 7);
    g.w = pick(r, g.k, 7);
    return g;
  };
  for (bool with_bias : {false, true}) {
    cases.push_back({with_bias ? "conv2d_bias" : "conv2d", [conv_geom, with_bias](Rng& r, const Options& opt) {
                       const ConvGeom g = conv_geom(r);
                       std::vector<Tensor> in{uniform({g.cin, g.h, g.w}, r, -1, 1),
                                              uniform({g.cout, g.cin, g.k, g.k}, r, -1, 1)};
                       if (with_bias) in.push_back(uniform({g.cout}, r, -1, 1));
                       const auto f = [g, with_bias](Tape&, const std::vector<Var>& v) {
                         return with_bias ? conv2d(v[0], v[1], v[2], g.stride, g.pad)
                                          : conv2d(v[0], v[1], g.stride, g.pad);
                       };
                       return check(f, in, r, opt);
                     }});
    cases.push_back({with_bias ? "conv_transpose2d_bias" : "conv_transpose2d",
                     [conv_geom, with_bias](Rng& r, const Options& opt) {
                       ConvGeom g = conv_geom(r);
                       g.h = pick(r, 1, 5);
                       g.w = pick(r, 1, 5);
                       const auto extent = [&](std::size_t n) { return (n - 1) * g.stride + g.k; };
                       if (extent(g.h) <= static_cast<std::size_t>(2 * g.pad) ||
                           extent(g.w) <= static_cast<std::size_t>(2 * g.pad))
                         g.pad = 0;
                       std::vector<Tensor> in{uniform({g.cin, g.h, g.w}, r, -1, 1),
                                              uniform({g.cin, g.cout, g.k, g.k}, r, -1, 1)};
                       if (with_bias) in.push_back(uniform({g.cout}, r, -1, 1));
                       const auto f = [g, with_bias](Tape&, const std::vector<Var>& v) {
                         return with_bias ? conv_transpose2d(v[0], v[1], v[2], g.stride, g.pad)
                                          : conv_transpose2d(v[0], v[1], g.stride, g.pad);
                       };
                       return check(f, in, r, opt);
                     }});
  }

  // Losses take fixed targets through the leaf list; their gradients are
  // simply not probed beyond what the function uses.
  const auto mask_pair = [](Rng& r) {
    const Shape s{1, pick(r, 3, 8), pick(r, 3, 8)};
    return std::vector<Tensor>{uniform(s, r, 0.05, 0.95), binary(s, r)};
  };
  const auto residual_pair = [](Rng& r) {
    const Shape s{1, pick(r, 3, 8), pick(r, 3, 8)};
    Tensor target(s);
    for (double& v : target.values()) v = static_cast<double>(r.below(3)) - 1.0;
    return std::vector<Tensor>{signed_away(s, r, 0.05, 0.95), target};
  };
  cases.push_back(op_case("loss_weighted_bce", mask_pair, [](Tape&, const std::vector<Var>& v) {
    return losses::weighted_bce(v[0], Tensor(v[1].value()));
  }, {0}));
  cases.push_back(op_case("loss_bce", mask_pair, [](Tape&, const std::vector<Var>& v) {
    return losses::bce(v[0], Tensor(v[1].value()));
  }, {0}));
  cases.push_back(op_case("loss_mask_dice", mask_pair,
                          [](Tape&, const std::vector<Var>& v) { return losses::mask_dice(v[0], v[1]); }));
  cases.push_back(op_case("loss_residual_dice", residual_pair,
                          [](Tape&, const std::vector<Var>& v) { return losses::residual_dice(v[0], v[1]); }));
  cases.push_back(op_case("loss_residual_mae", residual_pair,
                          [](Tape&, const std::vector<Var>& v) { return losses::residual_mae(v[0], v[1]); }));
  cases.push_back(op_case("loss_residual_mse", residual_pair,
                          [](Tape&, const std::vector<Var>& v) { return losses::residual_mse(v[0], v[1]); }));
  cases.push_back(op_case(
      "loss_adversarial_generator", [](Rng& r) { return std::vector<Tensor>{uniform({1}, r, -4, 4)}; },
      [](Tape&, const std::vector<Var>& v) { return losses::adversarial_generator(v[0]); }));
  cases.push_back(op_case(
      "loss_adversarial_discriminator",
      [](Rng& r) { return std::vector<Tensor>{uniform({1}, r, -4, 4), uniform({1}, r, -4, 4)}; },
      [](Tape&, const std::vector<Var>& v) { return losses::adversarial_discriminator(v[0], v[1]); }));
  cases.push_back(op_case(
      "loss_total",
      [](Rng& r) {
        const Shape s{1, pick(r, 3, 8), pick(r, 3, 8)};
        Tensor m_g = binary(s, r);
        Tensor rm_g(s);
        for (double& v : rm_g.values()) v = static_cast<double>(r.below(3)) - 1.0;
        return std::vector<Tensor>{uniform(s, r, 0.05, 0.95), m_g, signed_away(s, r, 0.05, 0.95), rm_g,
                                   uniform({1}, r, -3, 3)};
      },
      [](Tape&, const std::vector<Var>& v) {
        losses::LossConfig cfg;
        // Copies: the targets must not alias tape storage that grows.
        const Tensor m_g = v[1].value(), rm_g = v[3].value();
        return losses::total_loss(v[0], m_g, v[2], rm_g, v[4], cfg).total;
      },
      {0, 2, 4}));

  // Whole networks, probed through their parameters.
  const auto mdn_case = [](std::string name, auto tweak) {
    return Case{std::move(name), [tweak](Rng& r, const Options& opt) {
                  nn::MdnConfig cfg;
                  cfg.canvas = 16;
                  cfg.sfe_hidden = {6, 5};
                  cfg.encoder_channels = {3, 4};
                  cfg.decoder_channels = {4, 3};
                  cfg.refiner_channels = 3;
                  tweak(cfg);
                  nn::Mdn model(cfg, r.next());
                  for (std::size_t i = 0; i < model.params().size(); ++i)
                    for (double& v : model.params().tensor(i).values()) v += r.uniform(-0.05, 0.05);
                  const Tensor person = uniform({3, 16, 16}, r, 0, 1);
                  const Tensor m_ref = binary({1, 16, 16}, r, 0.5);
                  const Tensor sizes = uniform({10}, r, -1.5, 1.5);
                  const Tensor w = random_weights({1, 16, 16}, r);
                  const auto loss = [&](Tape& t) {
                    const auto out = model.forward(t, person, m_ref, sizes);
                    return tensor::add(weighted_sum(t, out.m_d, w), weighted_sum(t, out.rm_d, w));
                  };
                  return check_params(loss, model.params(), r, opt);
                }};
  };
  cases.push_back(mdn_case("mdn", [](nn::MdnConfig&) {}));
  cases.push_back(mdn_case("mdn_no_mr", [](nn::MdnConfig& c) { c.no_mr = true; }));
  cases.push_back(mdn_case("mdn_no_rmdn", [](nn::MdnConfig& c) { c.no_rmdn = true; }));
  cases.push_back(mdn_case("mdn_no_person_input", [](nn::MdnConfig& c) { c.no_person_input = true; }));
  for (bool patch : {false, true}) {
    cases.push_back({patch ? "discriminator_patch" : "discriminator", [patch](Rng& r, const Options& opt) {
                       nn::DiscriminatorConfig cfg;
                       cfg.canvas = 16;
                       cfg.channels = {3, 4};
                       cfg.patch = patch;
                       nn::Discriminator d(cfg, r.next());
                       for (std::size_t i = 0; i < d.params().size(); ++i)
                         for (double& v : d.params().tensor(i).values()) v += r.uniform(-0.05, 0.05);
                       const Tensor mask = uniform({1, 16, 16}, r, 0, 1);
                       const auto loss = [&](Tape& t) { return d.forward(t, t.constant(mask)); };
                       return check_params(loss, d.params(), r, opt);
                     }});
  }
  return cases;
}

}  // namespace

Probe check(const Function& f, const std::vector<Tensor>& inputs, Rng& rng, const Options& opt,
            const std::vector<std::size_t>& probed) {
  std::vector<Tensor> x = inputs;
  Tensor w;
  const auto eval = [&](Tape& tape, std::vector<Var>& leaves) {
    leaves.clear();
    for (const Tensor& t : x) leaves.push_back(tape.leaf(t));
    const Var out = f(tape, leaves);
    if (w.empty()) w = random_weights(out.shape(), rng);
    return weighted_sum(tape, out, w);
  };

  Tape tape;
  std::vector<Var> leaves;
  const Var loss = eval(tape, leaves);
  tape.backward(loss);
  const double base = loss.value().item();

  Probe p;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!probed.empty() && std::find(probed.begin(), probed.end(), i) == probed.end()) continue;
    const Tensor g = tape.grad(leaves[i]);
    for (std::size_t k : pick_coords(x[i].size(), opt.max_coords, rng)) {
      const double saved = x[i][k];
      const auto at = [&](double d) {
        x[i][k] = saved + d;
        Tape fresh;
        std::vector<Var> l;
        const double v = eval(fresh, l).value().item();
        x[i][k] = saved;
        return v;
      };
      probe_coord(g[k], base, at, opt, p);
    }
  }
  return p;
}

Report run_suite(const Options& opt) {
  const PrecisionScope precision;
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(opt.seed);
  Report report;
  for (const Case& c : build_cases()) {
    CaseResult r{c.name, 0, 0, 0, 0.0};
    for (int i = 0; i < opt.instances_per_case; ++i) {
      const Probe p = c.run(rng, opt);
      r.max_rel_error = std::max(r.max_rel_error, p.max_rel_error);
      r.coords += p.coords;
      r.kinks += p.kinks;
      ++r.instances;
    }
    report.instances += r.instances;
    report.max_rel_error = std::max(report.max_rel_error, r.max_rel_error);
    report.cases.push_back(r);
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

nlohmann::json to_json(const Report& r) {
  nlohmann::json cases = nlohmann::json::array();
  for (const auto& c : r.cases)
    cases.push_back({{"name", c.name},
                     {"instances", c.instances},
                     {"coords", c.coords},
                     {"kinks", c.kinks},
                     {"max_rel_error", c.max_rel_error}});
  return {{"instances", r.instances}, {"max_rel_error", r.max_rel_error}, {"seconds", r.seconds}, {"cases", cases}};
}

}  // namespace sizefit::gradcheck
