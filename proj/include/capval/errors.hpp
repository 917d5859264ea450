// errors.hpp: exception hierarchy shared across the library.

#pragma once

#include <stdexcept>
#include <string>

namespace capval {

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// A request could not reach the backend (connect failure, timeout, 5xx).
// Retryable by policy; carries no model content.
class TransportError : public Error {
 public:
  explicit TransportError(const std::string& what) : Error(what) {}
};

// An operation was invoked that the backend's descriptor does not advertise.
class CapabilityError : public Error {
 public:
  explicit CapabilityError(const std::string& what) : Error(what) {}
};

// The backend answered, but the payload does not parse into the expected
// shape. Never retried; the raw payload rides along for diagnosis.
class MalformedReplyError : public Error {
 public:
  MalformedReplyError(const std::string& what, std::string payload)
      : Error(what + "\nraw payload: " + payload), payload_(std::move(payload)) {}

  const std::string& payload() const { return payload_; }

 private:
  std::string payload_;
};

// Input files (lexicon, fixtures, configs, datasets) that fail to parse or
// violate format invariants.
class ParseError : public Error {
 public:
  explicit ParseError(const std::string& what) : Error(what) {}
};

// A scripted backend was asked for a request it has no entry for.
class FixtureMissError : public Error {
 public:
  FixtureMissError(const std::string& what, std::string key)
      : Error(what), key_(std::move(key)) {}

  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(what) {}
};

}  // namespace capval
