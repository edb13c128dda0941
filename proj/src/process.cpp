#include "torusim/process.hpp"

#include <algorithm>

namespace torusim {

namespace {
void prune_spent(std::vector<WaitQueue::Waiter>& ws) {
  if (ws.size() >= 16) std::erase_if(ws, [](const WaitQueue::Waiter& w) { return w.token->fired; });
}
}  // namespace

void WaitQueue::Awaiter::await_suspend(std::coroutine_handle<> h) {
  prune_spent(q.waiters_);
  q.waiters_.push_back({q.sched_->current(), h, std::make_shared<WaitToken>()});
}

void WaitQueue::notify_all() {
  if (waiters_.empty()) return;
  auto waiters = std::move(waiters_);
  waiters_.clear();
  for (auto& w : waiters) {
    if (w.token->fired) continue;
    w.token->fired = true;
    sched_->wake(w.proc, w.handle, sched_->now());
  }
}

ProcessRef Scheduler::spawn(std::string name, Process body, std::optional<SimTime> at) {
  auto p = std::make_shared<ProcessControl>();
  p->name = std::move(name);
  p->body = std::move(body);
  procs_.push_back(p);
  // Drop bookkeeping for processes that are gone.
  if (procs_.size() > 64 && procs_.size() % 64 == 0) {
    std::erase_if(procs_, [](const ProcessRef& q) { return !q->alive || q->finished; });
  }
  wake(p, p->body.handle(), at.value_or(kernel_.now()));
  return p;
}

void Scheduler::kill(const ProcessRef& p) {
  if (!p || !p->alive) return;
  p->alive = false;
  if (current_ == p) {
    p->kill_pending = true;
    return;
  }
  p->body.reset();
}

void Scheduler::wake(const std::weak_ptr<ProcessControl>& proc, std::coroutine_handle<> h,
                     SimTime at) {
  kernel_.schedule(at, EventClass::Application, "process.resume", [this, proc, h] {
    auto p = proc.lock();
    if (!p || !p->alive || p->finished) return;
    resume(p, h);
  });
}

void Scheduler::resume(const ProcessRef& p, std::coroutine_handle<> h) {
  auto saved = current_;
  current_ = p;
  ++p->resumes;
  ++total_resumes_;
  h.resume();
  current_ = saved;
  auto top = p->body.handle();
  if (p->kill_pending) {
    p->body.reset();
    return;
  }
  if (top && top.done()) {
    p->finished = true;
    auto err = top.promise().error;
    p->body.reset();
    if (err) {
      try {
        std::rethrow_exception(err);
      } catch (const std::exception& e) {
        throw SimError("process '" + p->name + "' failed: " + e.what());
      }
    }
    if (p->on_exit) p->on_exit();
  }
}

void Scheduler::SleepAwaiter::await_suspend(std::coroutine_handle<> h) {
  s.wake(s.current(), h, s.now() + delay);
}

void Scheduler::AnyAwaiter::await_suspend(std::coroutine_handle<> h) {
  auto token = std::make_shared<WaitToken>();
  for (auto* q : queues) {
    prune_spent(q->waiters_);
    q->waiters_.push_back({s.current(), h, token});
  }
}

std::size_t Scheduler::live_processes() const {
  return static_cast<std::size_t>(std::count_if(procs_.begin(), procs_.end(), [](const ProcessRef& p) {
    return p->alive && !p->finished;
  }));
}

}  // namespace torusim
