#include <cmath>
#include <numeric>

#include "doctest.h"
#include "helpers.hpp"
#include "stylelab/eval.hpp"

using namespace stylelab;

namespace {

// Rank correlation by the textbook formula; inputs must be tie-free.
double spearman_no_ties(const std::vector<double>& x, const std::vector<double>& y) {
  const std::size_t n = x.size();
  auto ranks = [n](const std::vector<double>& v) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
    std::vector<double> r(n);
    for (std::size_t i = 0; i < n; ++i) r[idx[i]] = double(i);
    return r;
  };
  const auto rx = ranks(x), ry = ranks(y);
  double d2 = 0;
  for (std::size_t i = 0; i < n; ++i) d2 += (rx[i] - ry[i]) * (rx[i] - ry[i]);
  return 1 - 6 * d2 / (double(n) * (double(n) * n - 1));
}

const ContentProbe& shared_content_probe() {
  static const ContentProbe probe = [] {
    ContentProbe p;
    ContentProbeOptions o;
    o.pool = 3000;
    o.steps = 1200;
    o.seed = 3;
    p.train(default_pretrain_styles(), o);
    return p;
  }();
  return probe;
}

}  // namespace

TEST_SUITE("eval") {
  TEST_CASE("spearman") {
    const std::vector<double> x{1, 2, 3, 4, 5};
    CHECK(spearman(x, std::vector<double>{2, 4, 6, 8, 10}) == doctest::Approx(1.0));
    CHECK(spearman(x, std::vector<double>{1, 4, 9, 16, 25}) == doctest::Approx(1.0));
    CHECK(spearman(x, std::vector<double>{5, 4, 3, 2, 1}) == doctest::Approx(-1.0));
    CHECK(spearman(x, std::vector<double>{3, 3, 3, 3, 3}) == 0.0);
    // ties take average ranks: ranks of y are 1.5, 1.5, 3, 4, 5
    const double r = spearman(x, std::vector<double>{0, 0, 1, 2, 3});
    const double mx = 3, my = 3;
    const std::vector<double> rx{1, 2, 3, 4, 5}, ry{1.5, 1.5, 3, 4, 5};
    double sxy = 0, sxx = 0, syy = 0;
    for (int i = 0; i < 5; ++i) {
      sxy += (rx[i] - mx) * (ry[i] - my);
      sxx += (rx[i] - mx) * (rx[i] - mx);
      syy += (ry[i] - my) * (ry[i] - my);
    }
    CHECK(r == doctest::Approx(sxy / std::sqrt(sxx * syy)));

    Rng rng(1);
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<double> a(12), b(12);
      for (auto& v : a) v = rng.uniform();
      for (auto& v : b) v = rng.uniform();
      CHECK(spearman(a, b) == doctest::Approx(spearman_no_ties(a, b)).epsilon(1e-9));
    }
    CHECK_THROWS_AS(spearman(x, std::vector<double>{1, 2}), DimensionError);
  }

  TEST_CASE("multiplier grid") {
    const auto g = multiplier_grid();
    REQUIRE(g.size() == 21);
    CHECK(g.front() == 0.0);
    CHECK(g.back() == 1.0);
    CHECK(multiplier_grid(1.0) == std::vector<double>{0.0, 1.0});
    CHECK_THROWS_AS(multiplier_grid(0.0), ParameterError);
  }

  TEST_CASE("generation spec is round robin") {
    const auto spec = make_generation_spec(subject_names(), 13, 5, 20);
    REQUIRE(spec.prompts.size() == 13);
    CHECK(spec.seeds.size() == 13);
    for (std::size_t i = 0; i < 13; ++i) CHECK(spec.prompts[i].subject == subject_names()[i % 6]);
    CHECK(spec.steps == 20);
  }

  TEST_CASE("style probe is a nearest-centroid rule") {
    const StyleModel model(testing::tiny_model_config(), 4);
    std::vector<Tensor> fit;
    std::vector<std::string> labels;
    const auto styles = default_pretrain_styles();
    for (const auto& s : styles)
      for (std::size_t k = 0; k < 6; ++k) {
        fit.push_back(render_sample(s, subject_names()[k], k));
        labels.push_back(s.id);
      }
    const auto probe = StyleProbe::fit(model.image_encoder, fit, labels);
    REQUIRE(probe.styles().size() == 8);

    // centroids are per-label means of the flattened embeddings
    const auto e0 = encode_images(model.image_encoder, stack_images(fit));
    for (std::size_t si = 0; si < styles.size(); ++si) {
      const auto& c = probe.centroid(styles[si].id);
      for (std::size_t j = 0; j < c.size(); ++j) {
        double m = 0;
        for (std::size_t k = 0; k < 6; ++k) m += e0[si * 6 + k].tokens.at(j);
        CHECK(std::abs(c[j] - m / 6) < 1e-5);
      }
    }

    // predictions agree with an exhaustive squared-distance argmin
    std::vector<Tensor> test;
    for (const auto& s : styles) test.push_back(render_sample(s, "ring", 77));
    const auto pred = probe.predict(model.image_encoder, stack_images(test));
    const auto et = encode_images(model.image_encoder, stack_images(test));
    for (std::size_t i = 0; i < test.size(); ++i) {
      double best = 1e300;
      std::string arg;
      for (const auto& id : probe.styles()) {
        const auto& c = probe.centroid(id);
        double d = 0;
        for (std::size_t j = 0; j < c.size(); ++j) d += std::pow(et[i].tokens.at(j) - c[j], 2);
        if (d < best) best = d, arg = id;
      }
      CHECK(pred[i] == arg);
    }

    // style_score is the fraction predicted as the target
    const Tensor batch = stack_images(test);
    for (const auto& id : probe.styles()) {
      double want = 0;
      for (const auto& p : pred) want += p == id;
      CHECK(probe.style_score(model.image_encoder, batch, id) == doctest::Approx(want / double(pred.size())));
    }

    // an image used as its own centroid is always classified as itself
    StyleProbe own;
    for (std::size_t i = 0; i < test.size(); ++i) {
      const auto v = et[i].tokens.data();
      own.set_centroid("s" + std::to_string(i), std::vector<double>(v.begin(), v.end()));
    }
    const auto self = own.predict(model.image_encoder, batch);
    for (std::size_t i = 0; i < test.size(); ++i) CHECK(self[i] == "s" + std::to_string(i));

    const auto back = StyleProbe::from_json(probe.to_json());
    CHECK(back.predict(model.image_encoder, batch) == pred);

    CHECK_THROWS_AS(probe.style_score(model.image_encoder, Tensor::zeros({0, 3, 32, 32}), styles[0].id),
                    ParameterError);
    CHECK_THROWS_AS(StyleProbe().style_score(model.image_encoder, batch, styles[0].id), StateError);
    CHECK_THROWS_AS(probe.style_score(model.image_encoder, batch, "ember"), StateError);
  }

  TEST_CASE("content probe") {
    const auto& probe = shared_content_probe();
    REQUIRE(probe.trained());
    std::vector<Tensor> clean;
    std::vector<std::string> subjects;
    for (const auto& s : default_pretrain_styles())
      for (std::size_t k = 0; k < 12; ++k) {
        subjects.push_back(subject_names()[k % 6]);
        clean.push_back(render_sample(s, subjects.back(), 900 + k));
      }
    const Tensor batch = stack_images(clean);
    CHECK(probe.content_score(batch, subjects) >= 0.95);

    // with balanced labels any constant guess scores exactly 1/6; noise should sit near that
    Rng rng(8);
    std::vector<real> noise(batch.numel());
    for (auto& v : noise) v = real(rng.uniform(-1, 1));
    const double noisy = probe.content_score(Tensor(batch.shape(), noise), subjects);
    CHECK(std::abs(noisy - 1.0 / 6) <= 0.1);

    // shuffled labels: accuracy tracks how many labels survived the shuffle
    std::vector<std::string> shuffled = subjects;
    for (std::size_t i = shuffled.size(); i > 1; --i) std::swap(shuffled[i - 1], shuffled[rng.index(i)]);
    double agree = 0;
    for (std::size_t i = 0; i < subjects.size(); ++i) agree += shuffled[i] == subjects[i];
    agree /= double(subjects.size());
    CHECK(std::abs(probe.content_score(batch, shuffled) - agree) <= 0.05);

    testing::TempDir dir;
    probe.save(dir / "c.bin");
    const auto back = ContentProbe::load(dir / "c.bin");
    CHECK(back.predict(batch) == probe.predict(batch));
    CHECK_THROWS_AS(ContentProbe().predict(batch), StateError);
  }

  TEST_CASE("sweep report on a two-point grid") {
    StyleModel model(testing::tiny_model_config(), 4);
    std::vector<Tensor> fit;
    std::vector<std::string> labels;
    for (const auto& s : default_pretrain_styles())
      for (std::size_t k = 0; k < 3; ++k) {
        fit.push_back(render_sample(s, subject_names()[k], k));
        labels.push_back(s.id);
      }
    const auto sprobe = StyleProbe::fit(model.image_encoder, fit, labels);
    const auto image = model.embed(fit[0]);
    const auto spec = make_generation_spec(subject_names(), 4, 2, 3);
    const std::vector<double> scales{1.0, 0.5}, grid{0.0, 1.0};
    const auto report =
        multiplier_sweep(model, scales, image, spec, grid, sprobe, shared_content_probe(), labels[0]);
    REQUIRE(report.curve.size() == 2);
    CHECK(report.curve[1].multiplier == 1.0);
    CHECK(report.samples == 4);
    CHECK(report.style_accuracy == report.curve.back().style_accuracy);
    CHECK(model.denoiser.cross_layer(1).effective_scale() == doctest::Approx(0.5));
    for (const auto& p : report.curve) {
      CHECK(p.style_accuracy >= 0);
      CHECK(p.style_accuracy <= 1);
    }
    const auto csv = report.to_csv();
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
    const auto ppm = plot_sweep_ppm(report, 64, 40);
    CHECK(ppm.size() > 64 * 40 * 3);
    CHECK(report.to_json().find("\"curve\"") != std::string::npos);
  }
}
