#pragma once

#include <stdexcept>
#include <string>

namespace qstar {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Invalid arguments or configuration supplied by the caller.
class UsageError : public Error {
public:
  using Error::Error;
};

class TerminalExpansion : public Error {
public:
  TerminalExpansion() : Error("cannot extend a terminal state") {}
};

/// An answer checker could not produce a verdict (distinct from a verdict of 0).
class CheckerFailure : public Error {
public:
  using Error::Error;
};

class EmptyInput : public Error {
public:
  EmptyInput() : Error("cannot segment empty text") {}
};

/// Retriable transport failure of a remote generator, surfaced after retries ran out.
class PolicyUnavailable : public Error {
public:
  using Error::Error;
};

/// A tabular policy has no actions at the queried state.
class ExhaustedSupport : public Error {
public:
  using Error::Error;
};

class ScorerUnavailable : public Error {
public:
  using Error::Error;
};

class EmptyPath : public Error {
public:
  EmptyPath() : Error("cannot aggregate an empty reward sequence") {}
};

/// Environment exceeds the oracle tractability cap.
class SizeBound : public Error {
public:
  using Error::Error;
};

/// A record or artifact file could not be parsed.
class FormatError : public Error {
public:
  using Error::Error;
};

} // namespace qstar
