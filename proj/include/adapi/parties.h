#pragma once

#include <exception>
#include <memory>
#include <optional>
#include <thread>
#include <type_traits>
#include <utility>

#include "adapi/mpc.h"
#include "adapi/transport.h"

namespace adapi {

// Runs party 0 on the calling thread and party 1 on a helper thread. A party
// that throws closes its channel so the peer unblocks; the root-cause error
// is rethrown in preference to the peer's resulting transport error.
template <class F0, class F1>
auto run_parties(net::Channel& ch0, net::Channel& ch1, F0&& f0, F1&& f1) {
  using R0 = std::invoke_result_t<F0, net::Channel&>;
  using R1 = std::invoke_result_t<F1, net::Channel&>;
  std::optional<R1> r1;
  std::exception_ptr e1;
  std::thread worker([&] {
    try {
      r1.emplace(f1(ch1));
    } catch (...) {
      e1 = std::current_exception();
      ch1.close();
    }
  });
  std::optional<R0> r0;
  std::exception_ptr e0;
  try {
    r0.emplace(f0(ch0));
  } catch (...) {
    e0 = std::current_exception();
    ch0.close();
  }
  worker.join();
  auto is_transport = [](const std::exception_ptr& e) {
    try {
      std::rethrow_exception(e);
    } catch (const TransportError&) {
      return true;
    } catch (...) {
      return false;
    }
  };
  if (e0 && e1) std::rethrow_exception(is_transport(e0) ? e1 : e0);
  if (e0) std::rethrow_exception(e0);
  if (e1) std::rethrow_exception(e1);
  return std::pair<R0, R1>(std::move(*r0), std::move(*r1));
}

// Both parties over a fresh in-process pair, each with its own Context.
template <class F>
auto run_local(F&& f, uint64_t dealer_seed = 1, uint64_t party_seed = 2,
               ring::FixedPointCodec codec = ring::FixedPointCodec(16)) {
  auto [c0, c1] = net::make_local_pair();
  return run_parties(
      *c0, *c1,
      [&](net::Channel& ch) {
        mpc::Context ctx(ch, dealer_seed, party_seed, codec);
        return f(ctx);
      },
      [&](net::Channel& ch) {
        mpc::Context ctx(ch, dealer_seed, party_seed, codec);
        return f(ctx);
      });
}

}  // namespace adapi
