#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "crdcgan/core/nn.hpp"
#include "crdcgan/core/image.hpp"
#include "crdcgan/core/serialize.hpp"
#include "crdcgan/core/tape.hpp"
#include "testutil.hpp"

using namespace crdcgan;
using testutil::fd_gradient;
using testutil::max_grad_rel_err;

namespace {

// Builds loss = reduce(op(x)) for a given op and returns d loss / d x both
// analytically and by finite differences.
double check_unary(const std::function<Var<double>(Var<double>)>& op, Tensor<double> x) {
  auto eval = [&](const Tensor<double>& in) {
    Tape<double> tp;
    Var<double> v = make_leaf(tp, in, true);
    return sum_all(op(v)).val().item();
  };
  Tape<double> tp;
  Var<double> v = make_leaf(tp, x, true);
  Var<double> loss = sum_all(op(v));
  tp.backward_from(loss.id);
  return max_grad_rel_err(v.grad(), fd_gradient(x, eval));
}

}  // namespace

TEST_CASE("rng streams are deterministic and well-behaved", "[core]") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) REQUIRE(a.next_u64() == b.next_u64());
  Rng c(7);
  double mean = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) mean += c.normal();
  mean /= n;
  REQUIRE(std::abs(mean) < 0.05);
  Rng d(9);
  for (int i = 0; i < 1000; ++i) {
    const double u = d.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    REQUIRE(d.uniform_int(5) < 5);
  }
}

TEST_CASE("elementwise ops match finite differences", "[core]") {
  Rng rng(1);
  Tensor<double> x = Tensor<double>::randn({3, 4}, rng);
  // keep values away from kinks of relu/abs/max
  for (int64_t i = 0; i < x.numel(); ++i)
    if (std::abs(x[i]) < 0.05) x[i] += 0.2;

  REQUIRE(check_unary([](Var<double> v) { return relu(v); }, x) < 1e-6);
  REQUIRE(check_unary([](Var<double> v) { return leaky_relu(v, 0.2); }, x) < 1e-6);
  REQUIRE(check_unary([](Var<double> v) { return vtanh(v); }, x) < 1e-6);
  REQUIRE(check_unary([](Var<double> v) { return vsigmoid(v); }, x) < 1e-6);
  REQUIRE(check_unary([](Var<double> v) { return softplus(v); }, x) < 1e-6);
  REQUIRE(check_unary([](Var<double> v) { return vexp(v); }, x) < 1e-6);
  REQUIRE(check_unary([](Var<double> v) { return vabs(v); }, x) < 1e-6);
  REQUIRE(check_unary([](Var<double> v) { return square(v); }, x) < 1e-6);
  REQUIRE(check_unary([](Var<double> v) { return -v; }, x) < 1e-6);
  REQUIRE(check_unary([](Var<double> v) { return v * 2.5; }, x) < 1e-6);
  REQUIRE(check_unary([](Var<double> v) { return v + 0.7; }, x) < 1e-6);
  REQUIRE(check_unary([](Var<double> v) { return vmax_scalar(v, 0.3); }, x) < 1e-6);

  Tensor<double> pos = Tensor<double>::full({4}, 0.5);
  pos[1] = 2.0;
  pos[2] = 0.9;
  REQUIRE(check_unary([](Var<double> v) { return vlog(v); }, pos) < 1e-6);
  REQUIRE(check_unary([](Var<double> v) { return vsqrt(v); }, pos) < 1e-6);
}

TEST_CASE("binary ops broadcast scalars and match finite differences", "[core]") {
  Rng rng(2);
  Tensor<double> a = Tensor<double>::randn({2, 3}, rng);
  Tensor<double> b = Tensor<double>::randn({2, 3}, rng);
  for (int64_t i = 0; i < b.numel(); ++i) b[i] += (b[i] > 0 ? 1.5 : -1.5);  // keep divisors away from 0

  auto both = [&](auto op) {
    auto eval_a = [&](const Tensor<double>& in) {
      Tape<double> tp;
      auto va = make_leaf(tp, in, true);
      auto vb = make_leaf(tp, b, false);
      return sum_all(op(va, vb)).val().item();
    };
    auto eval_b = [&](const Tensor<double>& in) {
      Tape<double> tp;
      auto va = make_leaf(tp, a, false);
      auto vb = make_leaf(tp, in, true);
      return sum_all(op(va, vb)).val().item();
    };
    Tape<double> tp;
    auto va = make_leaf(tp, a, true);
    auto vb = make_leaf(tp, b, true);
    auto loss = sum_all(op(va, vb));
    tp.backward_from(loss.id);
    REQUIRE(max_grad_rel_err(va.grad(), fd_gradient(a, eval_a)) < 1e-6);
    REQUIRE(max_grad_rel_err(vb.grad(), fd_gradient(b, eval_b)) < 1e-6);
  };
  both([](Var<double> x, Var<double> y) { return x + y; });
  both([](Var<double> x, Var<double> y) { return x - y; });
  both([](Var<double> x, Var<double> y) { return x * y; });
  both([](Var<double> x, Var<double> y) { return x / y; });
  both([](Var<double> x, Var<double> y) { return vmax(x, y); });

  // scalar broadcast: (2,3) op (1)
  Tensor<double> s = Tensor<double>::scalar(0.37);
  Tape<double> tp;
  auto va = make_leaf(tp, a, true);
  auto vs = make_leaf(tp, s, true);
  auto loss = sum_all(va * vs);
  tp.backward_from(loss.id);
  auto eval_s = [&](const Tensor<double>& in) {
    Tape<double> t2;
    auto x = make_leaf(t2, a, false);
    auto y = make_leaf(t2, in, true);
    return sum_all(x * y).val().item();
  };
  REQUIRE(max_grad_rel_err(vs.grad(), fd_gradient(s, eval_s)) < 1e-6);
}

TEST_CASE("reductions, softmax family and shape ops backprop correctly", "[core]") {
  Rng rng(3);

  SECTION("row_sum, mean_all, logsumexp") {
    Tensor<double> x = Tensor<double>::randn({3, 5}, rng);
    REQUIRE(check_unary([](Var<double> v) { return row_sum(v); }, x) < 1e-6);
    REQUIRE(check_unary([](Var<double> v) { return mean_all(v); }, x) < 1e-6);
    Tensor<double> v1 = Tensor<double>::randn({6}, rng);
    REQUIRE(check_unary([](Var<double> v) { return logsumexp(v); }, v1) < 1e-6);
  }

  SECTION("softmax_rows sums to one and matches FD") {
    Tensor<double> x = Tensor<double>::randn({4, 6}, rng);
    Tape<double> tp;
    auto v = make_leaf(tp, x, true);
    auto sm = softmax_rows(v);
    for (int i = 0; i < 4; ++i) {
      double s = 0;
      for (int j = 0; j < 6; ++j) s += sm.val()[i * 6 + j];
      REQUIRE(std::abs(s - 1.0) < 1e-12);
    }
    // weighted sum so the gradient is nontrivial
    Tensor<double> w = Tensor<double>::randn({4, 6}, rng);
    auto loss = sum_all(sm * make_constant(tp, w));
    tp.backward_from(loss.id);
    auto eval = [&](const Tensor<double>& in) {
      Tape<double> t2;
      auto vv = make_leaf(t2, in, true);
      return sum_all(softmax_rows(vv) * make_constant(t2, w)).val().item();
    };
    REQUIRE(max_grad_rel_err(v.grad(), fd_gradient(x, eval)) < 1e-6);
  }

  SECTION("log_softmax and cross entropy") {
    Tensor<double> x = Tensor<double>::randn({3, 4}, rng);
    std::vector<int> labels = {2, 0, 3};
    Tape<double> tp;
    auto v = make_leaf(tp, x, true);
    auto loss = cross_entropy_rows(v, labels);
    tp.backward_from(loss.id);
    auto eval = [&](const Tensor<double>& in) {
      Tape<double> t2;
      auto vv = make_leaf(t2, in, true);
      return cross_entropy_rows(vv, labels).val().item();
    };
    REQUIRE(max_grad_rel_err(v.grad(), fd_gradient(x, eval)) < 1e-6);
    REQUIRE_THROWS_AS(cross_entropy_rows(v, std::vector<int>{9, 0, 1}), std::invalid_argument);
  }

  SECTION("reshape, transpose, concat, slice, diag, gather, scale_rows") {
    Tensor<double> x = Tensor<double>::randn({3, 4}, rng);
    REQUIRE(check_unary([](Var<double> v) { return reshape(v, {4, 3}); }, x) < 1e-6);
    REQUIRE(check_unary([](Var<double> v) { return transpose2d(v); }, x) < 1e-6);
    REQUIRE(check_unary([](Var<double> v) { return slice_last(v, 1, 2); }, x) < 1e-6);
    REQUIRE(check_unary([](Var<double> v) { return slice_dim0(v, 1); }, x) < 1e-6);
    REQUIRE(check_unary(
                [](Var<double> v) {
                  return concat_last(std::vector<Var<double>>{slice_last(v, 0, 2), slice_last(v, 2, 2)});
                },
                x) < 1e-6);
    Tensor<double> sq = Tensor<double>::randn({4, 4}, rng);
    REQUIRE(check_unary([](Var<double> v) { return diag2d(v); }, sq) < 1e-6);
    std::vector<int> ids = {2, 0, 2, 1};
    REQUIRE(check_unary([&](Var<double> v) { return gather_rows(v, ids); }, x) < 1e-6);

    Tensor<double> m = Tensor<double>::randn({3, 4}, rng);
    Tensor<double> s = Tensor<double>::randn({3}, rng);
    Tape<double> tp;
    auto vm = make_leaf(tp, m, true);
    auto vs = make_leaf(tp, s, true);
    auto loss = sum_all(square(scale_rows(vm, vs)));
    tp.backward_from(loss.id);
    auto eval_m = [&](const Tensor<double>& in) {
      Tape<double> t2;
      return sum_all(square(scale_rows(make_leaf(t2, in, true), make_constant(t2, s)))).val().item();
    };
    auto eval_s = [&](const Tensor<double>& in) {
      Tape<double> t2;
      return sum_all(square(scale_rows(make_constant(t2, m), make_leaf(t2, in, true)))).val().item();
    };
    REQUIRE(max_grad_rel_err(vm.grad(), fd_gradient(m, eval_m)) < 1e-6);
    REQUIRE(max_grad_rel_err(vs.grad(), fd_gradient(s, eval_s)) < 1e-6);
  }
}

TEST_CASE("matmul and affine agree with Eigen and finite differences", "[core]") {
  Rng rng(4);
  Tensor<double> a = Tensor<double>::randn({3, 4}, rng);
  Tensor<double> b = Tensor<double>::randn({4, 2}, rng);
  Tensor<double> bias = Tensor<double>::randn({2}, rng);

  Tape<double> tp;
  auto va = make_leaf(tp, a, true);
  auto vb = make_leaf(tp, b, true);
  auto vbias = make_leaf(tp, bias, true);
  auto y = affine(va, vb, vbias);
  // forward check against a hand loop
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 2; ++j) {
      double s = bias[j];
      for (int k = 0; k < 4; ++k) s += a[i * 4 + k] * b[k * 2 + j];
      REQUIRE(std::abs(y.val()[i * 2 + j] - s) < 1e-12);
    }
  auto loss = sum_all(vtanh(y));
  tp.backward_from(loss.id);
  auto eval = [&](const Tensor<double>& in, int which) {
    Tape<double> t2;
    auto xa = make_leaf(t2, which == 0 ? in : a, which == 0);
    auto xb = make_leaf(t2, which == 1 ? in : b, which == 1);
    auto xc = make_leaf(t2, which == 2 ? in : bias, which == 2);
    return sum_all(vtanh(affine(xa, xb, xc))).val().item();
  };
  REQUIRE(max_grad_rel_err(va.grad(), fd_gradient(a, [&](auto& t) { return eval(t, 0); })) < 1e-6);
  REQUIRE(max_grad_rel_err(vb.grad(), fd_gradient(b, [&](auto& t) { return eval(t, 1); })) < 1e-6);
  REQUIRE(max_grad_rel_err(vbias.grad(), fd_gradient(bias, [&](auto& t) { return eval(t, 2); })) < 1e-6);

  REQUIRE_THROWS_AS(matmul(va, va), std::invalid_argument);
}

TEST_CASE("conv2d, upsample, instance_norm and spatial ops backprop", "[core]") {
  Rng rng(5);

  SECTION("conv2d stride 1 and stride 2") {
    for (int stride : {1, 2}) {
      Tensor<double> x = Tensor<double>::randn({2, 4, 4, 3}, rng);
      Tensor<double> w = Tensor<double>::randn({3, 3, 3, 2}, rng, 0.5);
      Tensor<double> b = Tensor<double>::randn({2}, rng);
      Tape<double> tp;
      auto vx = make_leaf(tp, x, true);
      auto vw = make_leaf(tp, w, true);
      auto vb = make_leaf(tp, b, true);
      auto loss = sum_all(vtanh(conv2d(vx, vw, vb, stride, 1)));
      tp.backward_from(loss.id);
      auto eval = [&](const Tensor<double>& in, int which) {
        Tape<double> t2;
        auto xa = make_leaf(t2, which == 0 ? in : x, which == 0);
        auto xw = make_leaf(t2, which == 1 ? in : w, which == 1);
        auto xb = make_leaf(t2, which == 2 ? in : b, which == 2);
        return sum_all(vtanh(conv2d(xa, xw, xb, stride, 1))).val().item();
      };
      REQUIRE(max_grad_rel_err(vx.grad(), fd_gradient(x, [&](auto& t) { return eval(t, 0); })) < 1e-5);
      REQUIRE(max_grad_rel_err(vw.grad(), fd_gradient(w, [&](auto& t) { return eval(t, 1); })) < 1e-5);
      REQUIRE(max_grad_rel_err(vb.grad(), fd_gradient(b, [&](auto& t) { return eval(t, 2); })) < 1e-5);
    }
  }

  SECTION("conv2d 4x4 valid reduces to a single cell") {
    Tensor<double> x = Tensor<double>::randn({1, 4, 4, 2}, rng);
    Tensor<double> w = Tensor<double>::randn({4, 4, 2, 1}, rng, 0.3);
    Tensor<double> b = Tensor<double>::zeros({1});
    Tape<double> tp;
    auto out = conv2d(make_leaf(tp, x, true), make_leaf(tp, w, false), make_leaf(tp, b, false), 1, 0);
    REQUIRE(out.val().shape() == std::vector<int>({1, 1, 1, 1}));
  }

  SECTION("upsample2x") {
    Tensor<double> x = Tensor<double>::randn({2, 3, 3, 4}, rng);
    REQUIRE(check_unary([](Var<double> v) { return upsample2x(v); }, x) < 1e-6);
  }

  SECTION("instance_norm") {
    Tensor<double> x = Tensor<double>::randn({2, 3, 3, 2}, rng);
    Tensor<double> gamma = Tensor<double>::full({2}, 1.3);
    Tensor<double> beta = Tensor<double>::full({2}, -0.2);
    Tape<double> tp;
    auto vx = make_leaf(tp, x, true);
    auto vg = make_leaf(tp, gamma, true);
    auto vb = make_leaf(tp, beta, true);
    Tensor<double> w = Tensor<double>::randn({2, 3, 3, 2}, rng);
    auto loss = sum_all(instance_norm(vx, vg, vb) * make_constant(tp, w));
    tp.backward_from(loss.id);
    auto eval = [&](const Tensor<double>& in, int which) {
      Tape<double> t2;
      auto xa = make_leaf(t2, which == 0 ? in : x, which == 0);
      auto xg = make_leaf(t2, which == 1 ? in : gamma, which == 1);
      auto xb = make_leaf(t2, which == 2 ? in : beta, which == 2);
      return sum_all(instance_norm(xa, xg, xb) * make_constant(t2, w)).val().item();
    };
    REQUIRE(max_grad_rel_err(vx.grad(), fd_gradient(x, [&](auto& t) { return eval(t, 0); })) < 1e-5);
    REQUIRE(max_grad_rel_err(vg.grad(), fd_gradient(gamma, [&](auto& t) { return eval(t, 1); })) < 1e-5);
    REQUIRE(max_grad_rel_err(vb.grad(), fd_gradient(beta, [&](auto& t) { return eval(t, 2); })) < 1e-5);
  }

  SECTION("reduce_mean_hw and spatial_broadcast") {
    Tensor<double> x = Tensor<double>::randn({2, 4, 4, 3}, rng);
    REQUIRE(check_unary([](Var<double> v) { return reduce_mean_hw(v); }, x) < 1e-6);
    Tensor<double> v2 = Tensor<double>::randn({2, 3}, rng);
    REQUIRE(check_unary([](Var<double> v) { return spatial_broadcast(v, 2, 2); }, v2) < 1e-6);
  }
}

TEST_CASE("composite cosine and mean_abs_diff", "[core]") {
  Rng rng(6);
  Tensor<double> a = Tensor<double>::randn({5}, rng);
  Tensor<double> b = Tensor<double>::randn({5}, rng);
  Tape<double> tp;
  auto va = make_leaf(tp, a, true);
  auto vb = make_leaf(tp, b, false);
  auto c = cosine(va, vb);
  // cosine of a vector with itself is 1
  auto cs = cosine(va, va);
  REQUIRE(std::abs(cs.val().item() - 1.0) < 1e-9);
  tp.backward_from(c.id);
  auto eval = [&](const Tensor<double>& in) {
    Tape<double> t2;
    return cosine(make_leaf(t2, in, true), make_constant(t2, b)).val().item();
  };
  REQUIRE(max_grad_rel_err(va.grad(), fd_gradient(a, eval)) < 1e-6);
}

TEST_CASE("gru cell backprop through time", "[core]") {
  Rng rng(7);
  ParamStore<double> ps;
  GruCell<double> cell(ps, "gru", 3, 4, rng);
  Tensor<double> x0 = Tensor<double>::randn({1, 3}, rng);
  Tensor<double> x1 = Tensor<double>::randn({1, 3}, rng);

  auto run = [&](ParamStore<double>& store) {
    Tape<double> tp;
    auto refs = make_refs(tp, store, true);
    auto h = make_constant(tp, Tensor<double>::zeros({1, 4}));
    h = cell.step(refs, make_constant(tp, x0), h);
    h = cell.step(refs, make_constant(tp, x1), h);
    auto loss = sum_all(square(h));
    tp.backward_from(loss.id);
    return std::pair{loss.val().item(), refs};
  };

  Tape<double> tp;
  auto refs = make_refs(tp, ps, true);
  auto h = make_constant(tp, Tensor<double>::zeros({1, 4}));
  h = cell.step(refs, make_constant(tp, x0), h);
  h = cell.step(refs, make_constant(tp, x1), h);
  auto loss = sum_all(square(h));
  tp.backward_from(loss.id);

  for (int pi = 0; pi < ps.count(); ++pi) {
    auto eval = [&](const Tensor<double>& in) {
      ParamStore<double> alt;
      GruCell<double> c2;
      c2 = cell;
      // rebuild a store with the perturbed parameter
      Tape<double> t2;
      ParamRefs<double> r2;
      r2.tape = &t2;
      for (int i = 0; i < ps.count(); ++i) r2.vars.push_back(make_leaf(t2, i == pi ? in : ps.value(i), false));
      auto hh = make_constant(t2, Tensor<double>::zeros({1, 4}));
      hh = c2.step(r2, make_constant(t2, x0), hh);
      hh = c2.step(r2, make_constant(t2, x1), hh);
      return sum_all(square(hh)).val().item();
    };
    REQUIRE(max_grad_rel_err(refs.vars[pi].grad(), fd_gradient(ps.value(pi), eval)) < 1e-5);
  }
}

TEST_CASE("adam takes a descent step and frozen leaves stay frozen", "[core]") {
  Rng rng(8);
  ParamStore<double> ps;
  Linear<double> lin(ps, "fc", 3, 1, rng, 0.5);
  Adam<double> opt(ps, 0.05, 0.5, 0.999);
  Tensor<double> x = Tensor<double>::randn({8, 3}, rng);

  double first = 0, last = 0;
  for (int it = 0; it < 50; ++it) {
    Tape<double> tp;
    auto refs = make_refs(tp, ps, true);
    auto loss = mean_all(square(lin(refs, make_constant(tp, x))));
    if (it == 0) first = loss.val().item();
    last = loss.val().item();
    tp.backward_from(loss.id);
    opt.step(ps, refs);
  }
  REQUIRE(last < first * 0.2);

  // a non-trainable leaf accumulates no gradient
  Tape<double> tp;
  auto frozen = make_leaf(tp, x, false);
  auto refs = make_refs(tp, ps, true);
  auto loss = mean_all(square(lin(refs, frozen)));
  tp.backward_from(loss.id);
  REQUIRE(frozen.grad().empty());
}

TEST_CASE("blob serialization round-trips stores and fields", "[core]") {
  namespace fs = std::filesystem;
  const std::string path = (fs::temp_directory_path() / "crdcgan_blob_test.bin").string();
  Rng rng(9);
  ParamStore<float> ps;
  Linear<float> lin(ps, "fc", 4, 2, rng, 0.1f);
  {
    BlobWriter w(path, "TEST", 1);
    w.put_string("note", "hello");
    w.put_i64("step", 1234);
    put_store(w, "params", ps);
    w.close();
  }
  BlobReader r(path, "TEST", 1);
  REQUIRE(r.get_string("note") == "hello");
  REQUIRE(r.get_i64("step") == 1234);
  ParamStore<float> ps2;
  Linear<float> lin2(ps2, "fc", 4, 2, rng, 0.1f);
  get_store(r, "params", ps2);
  for (int i = 0; i < ps.count(); ++i) {
    REQUIRE(max_abs_diff(ps.value(i), ps2.value(i)) == 0.0);
  }
  REQUIRE(hash_store(ps) == hash_store(ps2));
  REQUIRE_THROWS_AS(BlobReader(path, "OTHR", 1), ArtifactError);
  fs::remove(path);
}

TEST_CASE("image ppm round-trip and grid assembly", "[core]") {
  namespace fs = std::filesystem;
  Image8 img(5, 4);
  for (size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<uint8_t>((i * 7) % 256);
  const std::string path = (fs::temp_directory_path() / "crdcgan_img_test.ppm").string();
  write_ppm(img, path);
  Image8 back = read_ppm(path);
  REQUIRE(back.width == 5);
  REQUIRE(back.height == 4);
  REQUIRE(back.pixels == img.pixels);
  fs::remove(path);

  Tensor<float> t = image_to_tensor<float>(img);
  REQUIRE(t.shape() == std::vector<int>({1, 4, 5, 3}));
  Image8 again = tensor_to_image(t);
  REQUIRE(again.pixels == img.pixels);

  std::vector<std::vector<Image8>> rows{{img, img}, {img, img}};
  Image8 grid = make_grid(rows, 2);
  REQUIRE(grid.width == 2 * 5 + 2);
  REQUIRE(grid.height == 2 * 4 + 2);

  Tensor<float> x({1, 4, 4, 1});
  for (int i = 0; i < 16; ++i) x[i] = static_cast<float>(i);
  Tensor<float> down = downsample2x(x);
  REQUIRE(down.dim(1) == 2);
  REQUIRE(down[0] == Catch::Approx((0 + 1 + 4 + 5) / 4.0f));
}
