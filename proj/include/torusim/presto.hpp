#pragma once

#include "torusim/dnp.hpp"
#include "torusim/process.hpp"

namespace torusim {

/// Blocking message layer on top of SEND and the ring buffer. Calls must be
/// awaited from a logical process running on `rank`.

/// Suspends until the SEND completes or fails; returns the final status.
inline Task<TransferStatus> presto_send(Fabric& f, Rank rank, Rank dest, Bytes data) {
  Fabric::Options opts;
  opts.post_completion = false;
  const TransferId id = f.send(rank, dest, data, kUserPort, std::move(opts));
  while (!f.transfer(id).terminal()) co_await f.completion_waiters(rank).wait();
  co_return f.transfer(id).status;
}

/// Suspends until a message from `source` is in the ring.
inline Task<Bytes> presto_recv(Fabric& f, Rank rank, Rank source) {
  while (true) {
    if (auto e = f.recv_ring_from(rank, source)) co_return std::move(e->payload);
    co_await f.ring_waiters(rank).wait();
  }
}

}  // namespace torusim
