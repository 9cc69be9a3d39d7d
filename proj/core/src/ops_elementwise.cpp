#include <cmath>
#include <limits>
#include <memory>
#include <string>

#include "morphgrad/ops.hpp"

namespace morphgrad {

namespace {

void require_same_shape(const char* what, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(what) + ": shapes " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()) + " differ");
}

[[noreturn]] void domain_at(const std::string& what, std::size_t flat) {
  throw DomainError(what + " at flat index " + std::to_string(flat));
}

bool is_integer(double v) { return std::floor(v) == v && std::isfinite(v); }

void check_pow_domain(double base, double exp, std::size_t i) {
  if (!is_integer(exp) && base <= 0.0)
    domain_at("pow: fractional exponent needs a positive base, got " + std::to_string(base), i);
  if (exp < 0.0 && base == 0.0) domain_at("pow: negative exponent of zero", i);
}

double pow_dbase(double base, double exp) {
  if (exp == 0.0) return 0.0;
  if (exp == 1.0) return 1.0;
  return exp * std::pow(base, exp - 1.0);
}

const char* ew_name(EwOp op) {
  switch (op) {
    case EwOp::Add: return "add";
    case EwOp::Sub: return "sub";
    case EwOp::Mul: return "mul";
    case EwOp::Div: return "div";
    case EwOp::Pow: return "pow";
  }
  return "?";
}

}  // namespace

Tensor elementwise(EwOp op, const Tensor& a, const Tensor& b) {
  require_same_shape(ew_name(op), a, b);
  const std::size_t n = a.numel();
  std::vector<double> out(n);
  auto av = a.data(), bv = b.data();
  switch (op) {
    case EwOp::Add:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i] + bv[i];
      break;
    case EwOp::Sub:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i] - bv[i];
      break;
    case EwOp::Mul:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i] * bv[i];
      break;
    case EwOp::Div:
      for (std::size_t i = 0; i < n; ++i) {
        if (bv[i] == 0.0) domain_at("div: division by zero", i);
        out[i] = av[i] / bv[i];
      }
      break;
    case EwOp::Pow:
      for (std::size_t i = 0; i < n; ++i) {
        check_pow_domain(av[i], bv[i], i);
        out[i] = std::pow(av[i], bv[i]);
      }
      break;
  }
  Tensor result(a.shape(), std::move(out));
  Tape* tape = common_tape({&a, &b});
  if (!tape) return result;

  const int an = a.tracked() ? a.node() : -1;
  const int bn = b.tracked() ? b.node() : -1;
  auto ad = a.payload();
  auto bd = b.payload();
  auto rd = result.payload();
  int node = tape->append(result.shape(), {an, bn},
    [op, an, bn, ad, bd, rd, n](std::span<const double> g, Tape& t) {
      switch (op) {
        case EwOp::Add:
          if (an >= 0) { auto& ga = t.grad_buffer(an); for (std::size_t i = 0; i < n; ++i) ga[i] += g[i]; }
          if (bn >= 0) { auto& gb = t.grad_buffer(bn); for (std::size_t i = 0; i < n; ++i) gb[i] += g[i]; }
          break;
        case EwOp::Sub:
          if (an >= 0) { auto& ga = t.grad_buffer(an); for (std::size_t i = 0; i < n; ++i) ga[i] += g[i]; }
          if (bn >= 0) { auto& gb = t.grad_buffer(bn); for (std::size_t i = 0; i < n; ++i) gb[i] -= g[i]; }
          break;
        case EwOp::Mul:
          if (an >= 0) { auto& ga = t.grad_buffer(an); for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * (*bd)[i]; }
          if (bn >= 0) { auto& gb = t.grad_buffer(bn); for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * (*ad)[i]; }
          break;
        case EwOp::Div:
          if (an >= 0) { auto& ga = t.grad_buffer(an); for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] / (*bd)[i]; }
          if (bn >= 0) {
            auto& gb = t.grad_buffer(bn);
            for (std::size_t i = 0; i < n; ++i) gb[i] -= g[i] * (*rd)[i] / (*bd)[i];
          }
          break;
        case EwOp::Pow:
          if (an >= 0) {
            auto& ga = t.grad_buffer(an);
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * pow_dbase((*ad)[i], (*bd)[i]);
          }
          if (bn >= 0) {
            auto& gb = t.grad_buffer(bn);
            for (std::size_t i = 0; i < n; ++i) {
              // d/de a^e = ln(a) a^e; the forward domain check already
              // rejected nonpositive bases unless the exponent is integral,
              // in which case the exponent is treated as a constant shape
              // and must not be tracked on negative bases.
              if ((*ad)[i] <= 0.0) domain_at("pow: gradient w.r.t. exponent needs a positive base", i);
              gb[i] += g[i] * std::log((*ad)[i]) * (*rd)[i];
            }
          }
          break;
      }
    });
  result.bind(tape, node);
  return result;
}

Tensor elementwise(EwOp op, const Tensor& a, double b) {
  const std::size_t n = a.numel();
  std::vector<double> out(n);
  auto av = a.data();
  switch (op) {
    case EwOp::Add:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i] + b;
      break;
    case EwOp::Sub:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i] - b;
      break;
    case EwOp::Mul:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i] * b;
      break;
    case EwOp::Div:
      if (b == 0.0) throw DomainError("div: division by zero scalar");
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i] / b;
      break;
    case EwOp::Pow:
      for (std::size_t i = 0; i < n; ++i) {
        check_pow_domain(av[i], b, i);
        out[i] = std::pow(av[i], b);
      }
      break;
  }
  Tensor result(a.shape(), std::move(out));
  Tape* tape = common_tape({&a});
  if (!tape) return result;

  auto ad = a.payload();
  const int an = a.node();
  int node = tape->append(result.shape(), {an},
    [op, an, b, ad, n](std::span<const double> g, Tape& t) {
      auto& ga = t.grad_buffer(an);
      switch (op) {
        case EwOp::Add:
        case EwOp::Sub:
          for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
          break;
        case EwOp::Mul:
          for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * b;
          break;
        case EwOp::Div:
          for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] / b;
          break;
        case EwOp::Pow:
          for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * pow_dbase((*ad)[i], b);
          break;
      }
    });
  result.bind(tape, node);
  return result;
}

Tensor add(const Tensor& a, const Tensor& b) { return elementwise(EwOp::Add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(EwOp::Sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(EwOp::Mul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return elementwise(EwOp::Div, a, b); }
Tensor add(const Tensor& a, double b) { return elementwise(EwOp::Add, a, b); }
Tensor sub(const Tensor& a, double b) { return elementwise(EwOp::Sub, a, b); }
Tensor mul(const Tensor& a, double b) { return elementwise(EwOp::Mul, a, b); }
Tensor div(const Tensor& a, double b) { return elementwise(EwOp::Div, a, b); }
Tensor pow(const Tensor& base, double exponent) { return elementwise(EwOp::Pow, base, exponent); }
Tensor pow(const Tensor& base, const Tensor& exponent) { return elementwise(EwOp::Pow, base, exponent); }

namespace {

double sigmoid_scalar(double x) {
  double s;
  if (x >= 0.0) {
    s = 1.0 / (1.0 + std::exp(-x));
  } else {
    const double e = std::exp(x);
    s = e / (1.0 + e);
  }
  // Keep the open interval at f64 resolution; exp underflow would otherwise
  // land exactly on 0 or 1 for |x| beyond ~37.
  const double lo = std::numeric_limits<double>::min();
  const double hi = std::nextafter(1.0, 0.0);
  return s < lo ? lo : (s > hi ? hi : s);
}

}  // namespace

Tensor activation(Activation kind, const Tensor& x, double param) {
  const std::size_t n = x.numel();
  std::vector<double> out(n);
  auto xv = x.data();
  if (kind == Activation::Sigmoid) {
    for (std::size_t i = 0; i < n; ++i) out[i] = sigmoid_scalar(xv[i]);
  } else {
    for (std::size_t i = 0; i < n; ++i) out[i] = xv[i] >= 0.0 ? xv[i] : param * xv[i];
  }
  Tensor result(x.shape(), std::move(out));
  Tape* tape = common_tape({&x});
  if (!tape) return result;

  const int xn = x.node();
  auto xd = x.payload();
  auto rd = result.payload();
  int node = tape->append(result.shape(), {xn},
    [kind, param, xn, xd, rd, n](std::span<const double> g, Tape& t) {
      auto& gx = t.grad_buffer(xn);
      if (kind == Activation::Sigmoid) {
        for (std::size_t i = 0; i < n; ++i) {
          const double s = (*rd)[i];
          gx[i] += g[i] * s * (1.0 - s);
        }
      } else {
        for (std::size_t i = 0; i < n; ++i)
          gx[i] += g[i] * ((*xd)[i] >= 0.0 ? 1.0 : param);
      }
    });
  result.bind(tape, node);
  return result;
}

Tensor sigmoid(const Tensor& x) { return activation(Activation::Sigmoid, x); }

Tensor leaky_relu(const Tensor& x, double negative_slope) {
  return activation(Activation::LeakyRelu, x, negative_slope);
}

Tensor clamp_min(const Tensor& x, double floor) {
  const std::size_t n = x.numel();
  std::vector<double> out(n);
  auto xv = x.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = xv[i] < floor ? floor : xv[i];
  Tensor result(x.shape(), std::move(out));
  Tape* tape = common_tape({&x});
  if (!tape) return result;

  const int xn = x.node();
  auto xd = x.payload();
  int node = tape->append(result.shape(), {xn},
    [floor, xn, xd, n](std::span<const double> g, Tape& t) {
      auto& gx = t.grad_buffer(xn);
      for (std::size_t i = 0; i < n; ++i)
        if ((*xd)[i] > floor) gx[i] += g[i];
    });
  result.bind(tape, node);
  return result;
}

}  // namespace morphgrad
