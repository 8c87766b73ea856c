#pragma once

#include <fcntl.h>
#include <sys/mman.h>
#include <unistd.h>

#include <cstdint>
#include <cstring>
#include <map>
#include <mutex>
#include <span>
#include <string>
#include <vector>

#include "omniserve/errors.hpp"

namespace omni {

/// POSIX shared-memory region with bump allocation and per-request free
/// lists. Slots are reclaimed at request cleanup or on consuming reads;
/// when nothing is live the bump pointer resets so usage patterns repeat.
class ShmRegion {
 public:
  ShmRegion(std::string name, size_t size) : name_(std::move(name)), size_(size) {
    fd_ = shm_open(name_.c_str(), O_CREAT | O_RDWR, 0600);
    if (fd_ < 0) throw TransportDown("shm_open failed for " + name_);
    if (ftruncate(fd_, static_cast<off_t>(size_)) != 0) {
      close(fd_);
      shm_unlink(name_.c_str());
      throw TransportDown("ftruncate failed for " + name_);
    }
    base_ = static_cast<uint8_t*>(
        mmap(nullptr, size_, PROT_READ | PROT_WRITE, MAP_SHARED, fd_, 0));
    if (base_ == MAP_FAILED) {
      close(fd_);
      shm_unlink(name_.c_str());
      throw TransportDown("mmap failed for " + name_);
    }
  }

  ~ShmRegion() {
    if (base_ && base_ != MAP_FAILED) munmap(base_, size_);
    if (fd_ >= 0) close(fd_);
    shm_unlink(name_.c_str());
  }

  ShmRegion(const ShmRegion&) = delete;
  ShmRegion& operator=(const ShmRegion&) = delete;

  const std::string& name() const { return name_; }
  size_t capacity() const { return size_; }

  uint64_t alloc_and_write(uint64_t request_id, std::span<const uint8_t> data) {
    std::lock_guard lk(mu_);
    if (data.size() > size_) throw RegionFull("payload exceeds shm region");
    uint64_t off = alloc_locked(data.size());
    std::memcpy(base_ + off, data.data(), data.size());
    slots_[off] = {request_id, data.size()};
    allocated_ += data.size();
    return off;
  }

  std::vector<uint8_t> read(uint64_t offset, uint64_t length) const {
    std::lock_guard lk(mu_);
    if (offset + length > size_) throw ProtocolViolation("shm read out of range");
    return std::vector<uint8_t>(base_ + offset, base_ + offset + length);
  }

  /// Releases one slot (consuming get).
  void free_slot(uint64_t offset) {
    std::lock_guard lk(mu_);
    free_slot_locked(offset);
  }

  /// Releases every slot still held by a request; returns freed byte count.
  uint64_t free_request(uint64_t request_id) {
    std::lock_guard lk(mu_);
    uint64_t freed = 0;
    for (auto it = slots_.begin(); it != slots_.end();) {
      if (it->second.request_id == request_id) {
        freed += it->second.length;
        free_list_.push_back({it->first, it->second.length});
        allocated_ -= it->second.length;
        it = slots_.erase(it);
      } else {
        ++it;
      }
    }
    maybe_reset_locked();
    return freed;
  }

  uint64_t allocated_bytes() const {
    std::lock_guard lk(mu_);
    return allocated_;
  }

 private:
  struct Slot {
    uint64_t request_id;
    uint64_t length;
  };
  struct FreeBlock {
    uint64_t offset;
    uint64_t length;
  };

  uint64_t alloc_locked(uint64_t len) {
    // First-fit reuse, then bump.
    for (auto it = free_list_.begin(); it != free_list_.end(); ++it) {
      if (it->length >= len) {
        uint64_t off = it->offset;
        if (it->length == len) {
          free_list_.erase(it);
        } else {
          it->offset += len;
          it->length -= len;
        }
        return off;
      }
    }
    if (bump_ + len > size_) throw RegionFull("shm region full");
    uint64_t off = bump_;
    bump_ += len;
    return off;
  }

  void free_slot_locked(uint64_t offset) {
    auto it = slots_.find(offset);
    if (it == slots_.end()) return;
    free_list_.push_back({offset, it->second.length});
    allocated_ -= it->second.length;
    slots_.erase(it);
    maybe_reset_locked();
  }

  void maybe_reset_locked() {
    if (slots_.empty()) {
      free_list_.clear();
      bump_ = 0;
    }
  }

  std::string name_;
  size_t size_;
  int fd_ = -1;
  uint8_t* base_ = nullptr;
  mutable std::mutex mu_;
  uint64_t bump_ = 0;
  uint64_t allocated_ = 0;
  std::map<uint64_t, Slot> slots_;
  std::vector<FreeBlock> free_list_;
};

}  // namespace omni
