#include "adapi/mpc.h"

#include <algorithm>

namespace adapi::mpc {

using ring::RingElement;

BilinearSpec BilinearSpec::elementwise(Shape shape) {
  BilinearSpec s;
  s.kind = OpKind::Elementwise;
  s.x_shape = shape;
  s.y_shape = std::move(shape);
  return s;
}

BilinearSpec BilinearSpec::matmul(size_t m, size_t k, size_t n) {
  BilinearSpec s;
  s.kind = OpKind::MatMul;
  s.x_shape = {m, k};
  s.y_shape = {k, n};
  return s;
}

BilinearSpec BilinearSpec::convolution(const ConvGeometry& g) {
  g.validate();
  BilinearSpec s;
  s.kind = OpKind::Conv;
  s.conv = g;
  s.x_shape = g.input_shape();
  s.y_shape = g.kernel_shape();
  return s;
}

BilinearSpec BilinearSpec::with_support(std::vector<uint8_t> support) const {
  ADAPI_ENFORCE(support.empty() || support.size() == numel(y_shape), ShapeError,
                "support length does not match operand " + shape_str(y_shape));
  BilinearSpec s = *this;
  s.y_support = std::move(support);
  return s;
}

Shape BilinearSpec::out_shape() const {
  switch (kind) {
    case OpKind::Elementwise: return x_shape;
    case OpKind::MatMul: return {x_shape.at(0), y_shape.at(1)};
    case OpKind::Conv: return conv.output_shape();
  }
  return {};
}

RingTensor BilinearSpec::apply(const RingTensor& x, const RingTensor& y) const {
  require_same_shape(x.shape(), x_shape, "bilinear lhs");
  require_same_shape(y.shape(), y_shape, "bilinear rhs");
  switch (kind) {
    case OpKind::Elementwise: {
      RingTensor out(x_shape);
      for (size_t i = 0; i < out.numel(); ++i) {
        if (y_support.empty() || y_support[i]) out[i] = x[i] * y[i];
      }
      return out;
    }
    case OpKind::MatMul: return adapi::matmul(x, y, y_support);
    case OpKind::Conv: return conv2d(conv, x, y, y_support);
  }
  throw ProtocolError("unknown bilinear kind");
}

size_t BilinearSpec::opened_y_count() const {
  if (y_support.empty()) return numel(y_shape);
  return static_cast<size_t>(std::count_if(y_support.begin(), y_support.end(), [](uint8_t v) { return v != 0; }));
}

BeaverTriple::BeaverTriple(BilinearSpec spec, ArithmeticShare a, ArithmeticShare b, ArithmeticShare z)
    : spec_(std::move(spec)), a_(std::move(a)), b_(std::move(b)), z_(std::move(z)), valid_(true) {
  require_same_shape(a_.shape(), spec_.x_shape, "triple a");
  require_same_shape(b_.shape(), spec_.y_shape, "triple b");
  require_same_shape(z_.shape(), spec_.out_shape(), "triple z");
}

BeaverTriple::BeaverTriple(BeaverTriple&& o) noexcept
    : spec_(std::move(o.spec_)), a_(std::move(o.a_)), b_(std::move(o.b_)), z_(std::move(o.z_)),
      valid_(o.valid_), consumed_(o.consumed_) {
  o.valid_ = false;
}

BeaverTriple& BeaverTriple::operator=(BeaverTriple&& o) noexcept {
  if (this != &o) {
    spec_ = std::move(o.spec_);
    a_ = std::move(o.a_);
    b_ = std::move(o.b_);
    z_ = std::move(o.z_);
    valid_ = o.valid_;
    consumed_ = o.consumed_;
    o.valid_ = false;
  }
  return *this;
}

namespace {

constexpr uint64_t kDealerStream = 0x6465616c6572ULL;
constexpr uint64_t kPartyStream = 0x7061727479ULL;

RingTensor random_tensor(const Shape& shape, Prg& rng, std::span<const uint8_t> support = {}) {
  RingTensor t(shape);
  for (size_t i = 0; i < t.numel(); ++i) {
    const uint64_t v = rng.next_u64();
    if (support.empty() || support[i]) t[i] = RingElement(v);
  }
  return t;
}

uint64_t width_mask(unsigned width) { return width >= 64 ? ~uint64_t{0} : (uint64_t{1} << width) - 1; }

void put_word(std::vector<uint8_t>& out, uint64_t v, size_t nbytes) {
  for (size_t i = 0; i < nbytes; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

uint64_t get_word(const uint8_t* p, size_t nbytes) {
  uint64_t v = 0;
  for (size_t i = 0; i < nbytes; ++i) v |= uint64_t{p[i]} << (8 * i);
  return v;
}

}  // namespace

Dealer::Dealer(uint64_t seed, int party) : rng_(seed, kDealerStream), party_(party) {
  ADAPI_ENFORCE(party == 0 || party == 1, ProtocolError, "party id must be 0 or 1");
}

std::pair<BeaverTriple, BeaverTriple> Dealer::deal_from(const BilinearSpec& spec, const RingTensor& a,
                                                        const RingTensor& b, Prg& rng) {
  RingTensor z = spec.apply(a, b);
  auto [a0, a1] = share::share(a, rng);
  auto [b0, b1] = share::share(b, rng);
  auto [z0, z1] = share::share(z, rng);
  return {BeaverTriple(spec, std::move(a0), std::move(b0), std::move(z0)),
          BeaverTriple(spec, std::move(a1), std::move(b1), std::move(z1))};
}

std::pair<BeaverTriple, BeaverTriple> Dealer::deal_pair(const BilinearSpec& spec, Prg& rng) {
  const RingTensor a = random_tensor(spec.x_shape, rng);
  const RingTensor b = random_tensor(spec.y_shape, rng, spec.y_support);
  return deal_from(spec, a, b, rng);
}

BeaverTriple Dealer::beaver(const BilinearSpec& spec) {
  auto pair = deal_pair(spec, rng_);
  return party_ == 0 ? std::move(pair.first) : std::move(pair.second);
}

std::pair<BooleanTriples, BooleanTriples> Dealer::deal_boolean(size_t count, unsigned width, Prg& rng) {
  ADAPI_ENFORCE(width >= 1 && width <= 64, ProtocolError, "AND width must be in [1, 64]");
  const uint64_t mask = width_mask(width);
  BooleanTriples t0{0, width, {}, {}, {}}, t1{1, width, {}, {}, {}};
  for (auto* t : {&t0, &t1}) {
    t->a.resize(count);
    t->b.resize(count);
    t->c.resize(count);
  }
  for (size_t i = 0; i < count; ++i) {
    const uint64_t a = rng.next_u64() & mask, b = rng.next_u64() & mask;
    const uint64_t ra = rng.next_u64() & mask, rb = rng.next_u64() & mask, rc = rng.next_u64() & mask;
    t0.a[i] = ra;
    t1.a[i] = a ^ ra;
    t0.b[i] = rb;
    t1.b[i] = b ^ rb;
    t0.c[i] = rc;
    t1.c[i] = (a & b) ^ rc;
  }
  return {std::move(t0), std::move(t1)};
}

BooleanTriples Dealer::boolean(size_t count, unsigned width) {
  auto pair = deal_boolean(count, width, rng_);
  return party_ == 0 ? std::move(pair.first) : std::move(pair.second);
}

Context::Context(net::Channel& channel, uint64_t dealer_seed, uint64_t party_seed, ring::FixedPointCodec codec)
    : channel_(&channel),
      dealer_(dealer_seed, channel.party()),
      prg_(party_seed, kPartyStream + static_cast<uint64_t>(channel.party())),
      codec_(codec) {}

std::string Context::tag(std::string_view name) const { return prefix_ + std::string(name); }

Context::Scope::Scope(Context& ctx, std::string prefix) : ctx_(ctx), saved_(ctx.prefix_) {
  ctx_.prefix_ += prefix;
}

Context::Scope::~Scope() { ctx_.prefix_ = std::move(saved_); }

std::vector<uint8_t> Context::exchange(std::string_view name, std::span<const uint8_t> mine) {
  const std::string full = tag(name);
  if (party() == 0) {
    channel_->send(full, mine);
    return channel_->recv(full);
  }
  auto theirs = channel_->recv(full);
  channel_->send(full, mine);
  return theirs;
}

std::vector<uint64_t> Context::exchange_words(std::string_view name, std::span<const uint64_t> mine) {
  const std::string full = tag(name);
  if (party() == 0) {
    channel_->send_words(full, mine);
    return channel_->recv_words(full);
  }
  auto theirs = channel_->recv_words(full);
  channel_->send_words(full, mine);
  return theirs;
}

ArithmeticShare secure_mul(Context& ctx, const ArithmeticShare& x, const ArithmeticShare& y, BeaverTriple& triple) {
  ADAPI_ENFORCE(triple.usable(), ProtocolError, "Beaver triple already consumed");
  const int party = ctx.party();
  ADAPI_ENFORCE(x.party == party && y.party == party && triple.a().party == party, ProtocolError,
                "operands and triple must be this party's halves");
  const BilinearSpec& spec = triple.spec();
  if (x.shape() != spec.x_shape || y.shape() != spec.y_shape) {
    throw ProtocolError("operands " + shape_str(x.shape()) + ", " + shape_str(y.shape()) +
                        " do not match triple " + shape_str(spec.x_shape) + ", " + shape_str(spec.y_shape));
  }
  triple.mark_consumed();

  const size_t nx = x.numel(), ny = y.numel();
  std::vector<uint64_t> e_mine(nx);
  for (size_t i = 0; i < nx; ++i) e_mine[i] = (x.data[i] - triple.a().data[i]).value;
  std::vector<uint64_t> f_mine;
  f_mine.reserve(spec.opened_y_count());
  for (size_t i = 0; i < ny; ++i) {
    if (spec.y_support.empty() || spec.y_support[i]) f_mine.push_back((y.data[i] - triple.b().data[i]).value);
  }

  const auto e_theirs = ctx.exchange_words("E", e_mine);
  const auto f_theirs = ctx.exchange_words("F", f_mine);
  ADAPI_ENFORCE(e_theirs.size() == nx && f_theirs.size() == f_mine.size(), ProtocolError,
                "peer opened a differently sized operand");

  RingTensor e(spec.x_shape), f(spec.y_shape);
  for (size_t i = 0; i < nx; ++i) e[i] = RingElement(e_mine[i] + e_theirs[i]);
  for (size_t i = 0, k = 0; i < ny; ++i) {
    if (spec.y_support.empty() || spec.y_support[i]) {
      f[i] = RingElement(f_mine[k] + f_theirs[k]);
      ++k;
    }
  }

  RingTensor r = spec.apply(x.data, f);
  const RingTensor ey = spec.apply(e, y.data);
  for (size_t i = 0; i < r.numel(); ++i) r[i] += ey[i] + triple.z().data[i];
  if (party == 1) {
    const RingTensor ef = spec.apply(e, f);
    for (size_t i = 0; i < r.numel(); ++i) r[i] -= ef[i];
  }
  return ArithmeticShare{party, std::move(r)};
}

ArithmeticShare secure_mul_fixed(Context& ctx, const ArithmeticShare& x, const ArithmeticShare& y,
                                 BeaverTriple& triple) {
  return share::truncate(secure_mul(ctx, x, y, triple), ctx.codec().frac_bits());
}

std::vector<uint64_t> and_words(Context& ctx, std::string_view tag, std::span<const uint64_t> x,
                                std::span<const uint64_t> y, unsigned width, const BooleanTriples& t) {
  const size_t n = x.size();
  ADAPI_ENFORCE(y.size() == n && t.a.size() == n && t.width == width, ProtocolError,
                "AND operands and triples disagree in size or width");
  const uint64_t mask = width_mask(width);
  const size_t nbytes = (width + 7) / 8;
  std::vector<uint8_t> mine;
  mine.reserve(2 * n * nbytes);
  for (size_t i = 0; i < n; ++i) put_word(mine, (x[i] ^ t.a[i]) & mask, nbytes);
  for (size_t i = 0; i < n; ++i) put_word(mine, (y[i] ^ t.b[i]) & mask, nbytes);
  const auto theirs = ctx.exchange(tag, mine);
  ADAPI_ENFORCE(theirs.size() == mine.size(), ProtocolError, "peer sent a differently sized AND layer");

  std::vector<uint64_t> out(n);
  for (size_t i = 0; i < n; ++i) {
    const uint64_t e = get_word(mine.data() + i * nbytes, nbytes) ^ get_word(theirs.data() + i * nbytes, nbytes);
    const size_t off = (n + i) * nbytes;
    const uint64_t f = get_word(mine.data() + off, nbytes) ^ get_word(theirs.data() + off, nbytes);
    uint64_t z = (e & t.b[i]) ^ (f & t.a[i]) ^ t.c[i];
    if (t.party == 0) z ^= e & f;
    out[i] = z & mask;
  }
  return out;
}

std::vector<uint64_t> and_words(Context& ctx, std::string_view tag, std::span<const uint64_t> x,
                                std::span<const uint64_t> y, unsigned width) {
  const BooleanTriples t = ctx.dealer().boolean(x.size(), width);
  return and_words(ctx, tag, x, y, width, t);
}

std::vector<uint64_t> nonzero_bits(Context& ctx, std::span<const uint64_t> words) {
  const size_t n = words.size();
  std::vector<uint64_t> acc(words.begin(), words.end());
  std::vector<uint64_t> lo(n), hi(n);
  for (unsigned width = 32; width >= 1; width /= 2) {
    const uint64_t mask = width_mask(width);
    for (size_t i = 0; i < n; ++i) {
      lo[i] = acc[i] & mask;
      hi[i] = (acc[i] >> width) & mask;
    }
    const auto both = and_words(ctx, "or" + std::to_string(width), lo, hi, width);
    for (size_t i = 0; i < n; ++i) acc[i] = lo[i] ^ hi[i] ^ both[i];
  }
  return acc;
}

ArithmeticShare drelu(Context& ctx, const ArithmeticShare& x) {
  const int party = ctx.party();
  const size_t n = x.numel();
  std::vector<uint64_t> positive;
  {
    Context::Scope scope(ctx, "relu-signbit:");
    const BinaryShare bits = share::a2b(ctx, x);
    const auto nonzero = nonzero_bits(ctx, bits.bits.span());
    std::vector<uint64_t> non_negative(n);
    for (size_t i = 0; i < n; ++i) {
      non_negative[i] = (bits.bits[i] >> 63) ^ (party == 0 ? 1u : 0u);
    }
    positive = and_words(ctx, "positive", non_negative, nonzero, 1);
  }
  Context::Scope scope(ctx, "relu-b2a:");
  BinaryShare bit{party, Tensor<uint64_t>(x.shape(), std::move(positive))};
  return share::b2a(ctx, bit);
}

ArithmeticShare secure_relu(Context& ctx, const ArithmeticShare& x) {
  const ArithmeticShare d = drelu(ctx, x);
  Context::Scope scope(ctx, "relu-mul:");
  BeaverTriple triple = ctx.dealer().beaver(BilinearSpec::elementwise(x.shape()));
  return secure_mul(ctx, d, x, triple);
}

std::pair<std::vector<BeaverTriple>, std::vector<BeaverTriple>> dealer_triples(size_t count, const BilinearSpec& spec,
                                                                               uint64_t seed) {
  Dealer d0(seed, 0), d1(seed, 1);
  std::vector<BeaverTriple> s0, s1;
  s0.reserve(count);
  s1.reserve(count);
  for (size_t i = 0; i < count; ++i) {
    s0.push_back(d0.beaver(spec));
    s1.push_back(d1.beaver(spec));
  }
  return {std::move(s0), std::move(s1)};
}

}  // namespace adapi::mpc
