#include <cmath>
#include <sstream>

#include "doctest.h"
#include "helpers.hpp"
#include "stylelab/io.hpp"
#include "stylelab/nn.hpp"

using namespace stylelab;

namespace {

Tensor t2(std::size_t r, std::size_t c, std::vector<real> v) { return Tensor({r, c}, std::move(v)); }

void check_values(const Tensor& t, const std::vector<double>& want, double eps = 1e-6) {
  REQUIRE(t.numel() == want.size());
  for (std::size_t i = 0; i < want.size(); ++i) CHECK(t.at(i) == doctest::Approx(want[i]).epsilon(eps));
}

}  // namespace

TEST_SUITE("tensor") {
  TEST_CASE("matmul by identity and by a projector") {
    const Tensor m = t2(2, 2, {1, 2, 3, 4});
    check_values(matmul(t2(2, 2, {1, 0, 0, 1}), m), {1, 2, 3, 4});
    check_values(matmul(t2(2, 2, {1, 0, 0, 0}), t2(2, 2, {5, 6, 7, 8})), {5, 6, 0, 0});
  }

  TEST_CASE("matmul rejects mismatched inner dims") {
    CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), DimensionError);
    CHECK_THROWS_AS(add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2})), DimensionError);
  }

  TEST_CASE("softmax rows") {
    check_values(softmax_rows(t2(1, 2, {0, 0})), {0.5, 0.5});
    const Tensor big = softmax_rows(t2(1, 2, {1000, 0}));
    CHECK(std::isfinite(big.at(0)));
    CHECK(big.at(0) == doctest::Approx(1.0));
    CHECK(big.at(1) == doctest::Approx(0.0));
    // exp/sum evaluated directly
    const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
    const Tensor s = softmax_rows(t2(1, 3, {1, 2, 3}));
    for (int i = 0; i < 3; ++i) CHECK(std::abs(s.at(i) - std::exp(i + 1.0) / z) < 1e-6);
    CHECK(std::abs(s.at(0) - 0.09003) < 1e-5);
    CHECK(std::abs(s.at(1) - 0.24473) < 1e-5);
    CHECK(std::abs(s.at(2) - 0.66524) < 1e-5);
  }

  TEST_CASE("softmax rows sum to one") {
    Rng rng(1);
    for (int trial = 0; trial < 50; ++trial) {
      const std::size_t r = 1 + rng.index(5), c = 1 + rng.index(9);
      const Tensor s = softmax_rows(random_tensor({r, c}, rng, 5.0));
      for (std::size_t i = 0; i < r; ++i) {
        double acc = 0;
        for (std::size_t j = 0; j < c; ++j) acc += s.at(i * c + j);
        CHECK(std::abs(acc - 1.0) < 1e-6);
      }
    }
  }

  TEST_CASE("cosine") {
    const Tensor v = t2(1, 3, {1, -2, 0.5});
    CHECK(cosine(v, v) == doctest::Approx(1.0));
    CHECK(cosine(v, scale(v, -1)) == doctest::Approx(-1.0));
    CHECK(std::abs(cosine(t2(1, 2, {1, 0}), t2(1, 2, {1, 1})) - 0.70711) < 1e-5);
    CHECK(cosine(v, Tensor::zeros({1, 3})) == 0.0);
    Rng rng(2);
    for (int i = 0; i < 200; ++i) {
      const double c = cosine(random_tensor({7}, rng, 1.0), random_tensor({7}, rng, 1.0));
      CHECK(c >= -1 - 1e-9);
      CHECK(c <= 1 + 1e-9);
    }
  }

  TEST_CASE("sum of squares gradient") {
    Tensor w({2}, {1, 2}, true);
    ComputeGraph g;
    {
      auto s = g.activate();
      g.backward(sum(mul(w, w)));
    }
    CHECK(w.grad()[0] == doctest::Approx(2));
    CHECK(w.grad()[1] == doctest::Approx(4));
  }

  TEST_CASE("constant loss leaves zero gradients") {
    Tensor w({2}, {1, 2}, true);
    ComputeGraph g;
    {
      auto s = g.activate();
      const Tensor c = Tensor::scalar(3);
      g.backward(add(c, Tensor::scalar(1)));
    }
    if (w.has_grad()) {
      CHECK(w.grad()[0] == 0);
      CHECK(w.grad()[1] == 0);
    }
  }

  TEST_CASE("leaf gradients accumulate across backward calls") {
    Tensor w({2}, {1, 2}, true);
    for (int k = 0; k < 2; ++k) {
      ComputeGraph g;
      auto s = g.activate();
      g.backward(sum(mul(w, w)));
    }
    CHECK(w.grad()[1] == doctest::Approx(8));
    w.zero_grad();
    CHECK(w.grad()[1] == 0);
  }

  TEST_CASE("backward needs a scalar") {
    Tensor w({2}, {1, 2}, true);
    ComputeGraph g;
    auto s = g.activate();
    const Tensor y = mul(w, w);
    CHECK_THROWS_AS(g.backward(y), ContractError);
  }

  TEST_CASE("no recording without an active graph") {
    Tensor w({2}, {1, 2}, true);
    const Tensor y = mul(w, w);
    CHECK_FALSE(y.requires_grad());
  }

  TEST_CASE("same inputs give bit-identical results") {
    Rng a(5), b(5);
    const Tensor x = random_tensor({6, 8}, a, 1.0), y = random_tensor({6, 8}, b, 1.0);
    CHECK(bit_equal(x, y));
    Rng r(6);
    const Tensor w = random_tensor({8, 8}, r, 1.0);
    CHECK(bit_equal(softmax_rows(matmul(x, w)), softmax_rows(matmul(y, w))));
  }

  TEST_CASE("attention groups do not mix") {
    Rng rng(3);
    Tensor q = random_tensor({4, 4}, rng, 1.0), k = random_tensor({6, 4}, rng, 1.0), v = random_tensor({6, 4}, rng, 1.0);
    const Tensor full = attention(q, k, v, 2, 2);
    // perturb the second group's keys: first group's output must not change
    auto kd = k.mutable_data();
    for (std::size_t i = 12; i < 24; ++i) kd[i] += 1;
    const Tensor moved = attention(q, k, v, 2, 2);
    for (std::size_t i = 0; i < 8; ++i) CHECK(full.at(i) == moved.at(i));
  }

  TEST_CASE("tensor container round trip") {
    Rng rng(4);
    const Tensor t = random_tensor({2, 3, 4}, rng, 1.0);
    std::ostringstream os;
    write_tensor(os, t);
    const std::string s = os.str();
    CHECK(s.substr(0, 8) == "STLTNSR1");
    CHECK(s.size() == 8 + 4 + 3 * 4 + 24 * 4);
    std::vector<std::uint8_t> bytes(s.begin(), s.end());
    std::size_t off = 0;
    const Tensor back = read_tensor(bytes, off);
    CHECK(off == bytes.size());
    CHECK(back.shape() == t.shape());
    CHECK(max_abs_diff(back, t) < 1e-7);
  }

  TEST_CASE("malformed containers carry the failing offset") {
    std::vector<std::uint8_t> bad{'N', 'O', 'P', 'E', '0', '0', '0', '0'};
    std::size_t off = 0;
    try {
      (void)read_tensor(bad, off);
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(e.offset() == 0);
    }
    std::ostringstream os;
    write_tensor(os, Tensor::zeros({3, 3}));
    std::string s = os.str();
    s.resize(s.size() - 5);
    std::vector<std::uint8_t> trunc(s.begin(), s.end());
    off = 0;
    CHECK_THROWS_AS((void)read_tensor(trunc, off), FormatError);
  }

  TEST_CASE("atomic writes leave no temporary behind") {
    testing::TempDir dir;
    write_text_atomic(dir / "a.txt", "hello");
    write_text_atomic(dir / "a.txt", "world");
    const auto bytes = read_file_bytes(dir / "a.txt");
    CHECK(std::string(bytes.begin(), bytes.end()) == "world");
    std::size_t files = 0;
    for (const auto& e : std::filesystem::directory_iterator(dir.path())) (void)e, ++files;
    CHECK(files == 1);
    CHECK_THROWS_AS(read_file_bytes(dir / "missing"), IoError);
  }
}
