#pragma once

#include <stdexcept>
#include <string>

namespace omni {

struct OmniError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct WriteConflict : OmniError {
  explicit WriteConflict(const std::string& key)
      : OmniError("write conflict on key: " + key) {}
};

struct MissingKey : OmniError {
  explicit MissingKey(const std::string& key)
      : OmniError("missing key: " + key) {}
};

struct TimeoutError : OmniError {
  using OmniError::OmniError;
};

struct TransportDown : OmniError {
  using OmniError::OmniError;
};

struct RegionFull : OmniError {
  using OmniError::OmniError;
};

struct ProtocolViolation : OmniError {
  using OmniError::OmniError;
};

struct AlreadyOpen : OmniError {
  using OmniError::OmniError;
};

struct BadDtype : OmniError {
  using OmniError::OmniError;
};

struct RejectedTooLarge : OmniError {
  using OmniError::OmniError;
};

struct ConfigInvalid : OmniError {
  using OmniError::OmniError;
};

struct PortInUse : OmniError {
  using OmniError::OmniError;
};

struct EngineSpawnFailed : OmniError {
  using OmniError::OmniError;
};

struct Overloaded : OmniError {
  using OmniError::OmniError;
};

struct Rejected : OmniError {
  using OmniError::OmniError;
};

struct TransferFnError : OmniError {
  using OmniError::OmniError;
};

struct IncompleteRecord : OmniError {
  using OmniError::OmniError;
};

struct NoAudio : OmniError {
  using OmniError::OmniError;
};

struct ForwardError : OmniError {
  using OmniError::OmniError;
};

}  // namespace omni
