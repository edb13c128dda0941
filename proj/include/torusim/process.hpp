#pragma once

#include <coroutine>
#include <exception>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "torusim/engine.hpp"

namespace torusim {

/// Top-level coroutine body of a logical process. Created suspended; the
/// Scheduler owns it and is the only party that ever resumes it.
class Process {
 public:
  struct promise_type {
    std::exception_ptr error;
    Process get_return_object() {
      return Process{std::coroutine_handle<promise_type>::from_promise(*this)};
    }
    std::suspend_always initial_suspend() noexcept { return {}; }
    std::suspend_always final_suspend() noexcept { return {}; }
    void return_void() noexcept {}
    void unhandled_exception() { error = std::current_exception(); }
  };
  using Handle = std::coroutine_handle<promise_type>;

  Process() = default;
  explicit Process(Handle h) : h_(h) {}
  Process(Process&& o) noexcept : h_(std::exchange(o.h_, {})) {}
  Process& operator=(Process&& o) noexcept {
    if (this != &o) {
      reset();
      h_ = std::exchange(o.h_, {});
    }
    return *this;
  }
  Process(const Process&) = delete;
  Process& operator=(const Process&) = delete;
  ~Process() { reset(); }

  Handle handle() const { return h_; }
  void reset() {
    if (h_) h_.destroy();
    h_ = {};
  }

 private:
  Handle h_;
};

namespace detail {
struct TaskPromiseBase {
  std::coroutine_handle<> continuation;
  std::exception_ptr error;
  std::suspend_always initial_suspend() noexcept { return {}; }
  struct FinalAwaiter {
    bool await_ready() noexcept { return false; }
    template <typename P>
    std::coroutine_handle<> await_suspend(std::coroutine_handle<P> h) noexcept {
      auto c = h.promise().continuation;
      return c ? c : std::noop_coroutine();
    }
    void await_resume() noexcept {}
  };
  FinalAwaiter final_suspend() noexcept { return {}; }
  void unhandled_exception() { error = std::current_exception(); }
};
}  // namespace detail

/// Lazily started awaitable coroutine with a result, for helpers called from
/// process bodies. Awaiting it transfers control symmetrically.
template <typename T = void>
class Task {
 public:
  struct promise_type : detail::TaskPromiseBase {
    std::optional<T> value;
    Task get_return_object() {
      return Task{std::coroutine_handle<promise_type>::from_promise(*this)};
    }
    template <typename U>
    void return_value(U&& v) {
      value.emplace(std::forward<U>(v));
    }
  };
  using Handle = std::coroutine_handle<promise_type>;

  explicit Task(Handle h) : h_(h) {}
  Task(Task&& o) noexcept : h_(std::exchange(o.h_, {})) {}
  Task(const Task&) = delete;
  ~Task() {
    if (h_) h_.destroy();
  }

  bool await_ready() const noexcept { return false; }
  std::coroutine_handle<> await_suspend(std::coroutine_handle<> caller) {
    h_.promise().continuation = caller;
    return h_;
  }
  T await_resume() {
    if (h_.promise().error) std::rethrow_exception(h_.promise().error);
    return std::move(*h_.promise().value);
  }

 private:
  Handle h_;
};

template <>
class Task<void> {
 public:
  struct promise_type : detail::TaskPromiseBase {
    Task get_return_object() {
      return Task{std::coroutine_handle<promise_type>::from_promise(*this)};
    }
    void return_void() noexcept {}
  };
  using Handle = std::coroutine_handle<promise_type>;

  explicit Task(Handle h) : h_(h) {}
  Task(Task&& o) noexcept : h_(std::exchange(o.h_, {})) {}
  Task(const Task&) = delete;
  ~Task() {
    if (h_) h_.destroy();
  }

  bool await_ready() const noexcept { return false; }
  std::coroutine_handle<> await_suspend(std::coroutine_handle<> caller) {
    h_.promise().continuation = caller;
    return h_;
  }
  void await_resume() {
    if (h_.promise().error) std::rethrow_exception(h_.promise().error);
  }

 private:
  Handle h_;
};

struct ProcessControl {
  std::string name;
  Process body;
  bool alive = true;
  bool finished = false;
  bool kill_pending = false;
  std::uint64_t resumes = 0;
  std::function<void()> on_exit;
};
using ProcessRef = std::shared_ptr<ProcessControl>;

/// One-shot wake token. A waiter registered on several queues is resumed by
/// whichever fires first; the others see the token spent.
struct WaitToken {
  bool fired = false;
};

class Scheduler;

/// Condition-variable style queue of suspended processes.
class WaitQueue {
 public:
  WaitQueue() = default;
  explicit WaitQueue(Scheduler& s) : sched_(&s) {}

  void bind(Scheduler& s) { sched_ = &s; }

  struct Awaiter {
    WaitQueue& q;
    bool await_ready() const noexcept { return false; }
    void await_suspend(std::coroutine_handle<> h);
    void await_resume() const noexcept {}
  };
  /// Suspend the current process until notified. Callers re-check their
  /// condition in a loop after waking.
  Awaiter wait() { return Awaiter{*this}; }

  void notify_all();
  bool empty() const { return waiters_.empty(); }

  struct Waiter {
    std::weak_ptr<ProcessControl> proc;
    std::coroutine_handle<> handle;
    std::shared_ptr<WaitToken> token;
  };

 private:
  friend class Scheduler;
  Scheduler* sched_ = nullptr;
  std::vector<Waiter> waiters_;
};

/// Owns logical processes and resumes them through kernel events.
class Scheduler {
 public:
  explicit Scheduler(Kernel& k) : kernel_(k) {}
  Scheduler(const Scheduler&) = delete;
  Scheduler& operator=(const Scheduler&) = delete;

  Kernel& kernel() { return kernel_; }
  SimTime now() const { return kernel_.now(); }

  /// Start `body` at time `at` (default: now).
  ProcessRef spawn(std::string name, Process body, std::optional<SimTime> at = std::nullopt);

  /// Destroy a process. Its pending wakeups become no-ops.
  void kill(const ProcessRef& p);

  /// The process whose code is currently executing, or null.
  const ProcessRef& current() const { return current_; }

  struct SleepAwaiter {
    Scheduler& s;
    SimTime delay;
    bool await_ready() const noexcept { return false; }
    void await_suspend(std::coroutine_handle<> h);
    void await_resume() const noexcept {}
  };
  SleepAwaiter sleep(SimTime cycles) { return SleepAwaiter{*this, cycles}; }

  /// Suspend until any of the queues is notified.
  struct AnyAwaiter {
    Scheduler& s;
    std::vector<WaitQueue*> queues;
    bool await_ready() const noexcept { return false; }
    void await_suspend(std::coroutine_handle<> h);
    void await_resume() const noexcept {}
  };
  AnyAwaiter wait_any(std::vector<WaitQueue*> queues) { return AnyAwaiter{*this, std::move(queues)}; }

  std::uint64_t total_resumes() const { return total_resumes_; }
  std::size_t live_processes() const;

  void wake(const std::weak_ptr<ProcessControl>& proc, std::coroutine_handle<> h,
            SimTime at);

 private:
  void resume(const ProcessRef& p, std::coroutine_handle<> h);

  Kernel& kernel_;
  ProcessRef current_;
  std::vector<ProcessRef> procs_;
  std::uint64_t total_resumes_ = 0;
};

}  // namespace torusim
