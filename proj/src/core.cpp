#include "sdsgan/core.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <sstream>
#include <thread>
#include <vector>

namespace sdsgan {

std::string Rng::state() const {
  std::ostringstream os;
  os << engine_;
  return os.str();
}

void Rng::set_state(const std::string& s) {
  std::istringstream is(s);
  is >> engine_;
  if (is.fail()) throw CorruptionError("invalid rng state");
}

namespace {
std::atomic<bool> g_single_threaded{false};
}

void set_single_threaded(bool on) { g_single_threaded = on; }
bool single_threaded() { return g_single_threaded; }

void parallel_for(Index n, const std::function<void(Index)>& body, int max_workers) {
  const unsigned hw = max_workers > 0 ? static_cast<unsigned>(max_workers) : std::max(1u, std::thread::hardware_concurrency());
  const Index workers = std::min<Index>(n, g_single_threaded ? 1 : hw);
  if (workers <= 1) {
    for (Index i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<Index> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (Index w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (Index i = next++; i < n; i = next++) {
        try {
          body(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace sdsgan
