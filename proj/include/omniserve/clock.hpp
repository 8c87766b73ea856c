#pragma once

#include <chrono>
#include <cstdint>
#include <thread>

namespace omni {

/// Microsecond clock the runtime charges simulated costs against.
/// The virtual implementation jumps instantly (deterministic benchmarks);
/// the wall implementation sleeps for real.
class Clock {
 public:
  virtual ~Clock() = default;
  virtual uint64_t now_us() const = 0;
  virtual void advance_to_us(uint64_t t) = 0;
  virtual bool is_virtual() const = 0;

  void advance_by_us(uint64_t d) { advance_to_us(now_us() + d); }
};

class VirtualClock final : public Clock {
 public:
  uint64_t now_us() const override { return now_; }
  void advance_to_us(uint64_t t) override {
    if (t > now_) now_ = t;
  }
  bool is_virtual() const override { return true; }

 private:
  uint64_t now_ = 0;
};

class WallClock final : public Clock {
 public:
  WallClock() : epoch_(std::chrono::steady_clock::now()) {}

  uint64_t now_us() const override {
    return std::chrono::duration_cast<std::chrono::microseconds>(
               std::chrono::steady_clock::now() - epoch_)
        .count();
  }
  void advance_to_us(uint64_t t) override {
    std::this_thread::sleep_until(epoch_ + std::chrono::microseconds(t));
  }
  bool is_virtual() const override { return false; }

 private:
  std::chrono::steady_clock::time_point epoch_;
};

}  // namespace omni
