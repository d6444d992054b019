// Copyright (c) 2026, The medtune Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace medtune {

// Base for every error raised by the library. The CLI maps subclasses onto
// exit codes: InputError and its children are user-input problems (2), the
// rest are runtime failures (1).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InputError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public InputError {
 public:
  using InputError::InputError;
};

// Malformed record in a line-oriented data file.
class DatasetError : public InputError {
 public:
  DatasetError(std::string path, std::size_t line, const std::string& what)
      : InputError(path + ":" + std::to_string(line) + ": " + what),
        path_(std::move(path)),
        line_(line) {}

  const std::string& path() const noexcept { return path_; }
  std::size_t line() const noexcept { return line_; }

 private:
  std::string path_;
  std::size_t line_;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

// Caller broke a documented precondition of an API.
class ContractError : public Error {
 public:
  using Error::Error;
};

class EmptyLossSupport : public Error {
 public:
  EmptyLossSupport() : Error("empty loss support: mask has no nonzero entry") {}
};

class ContextOverflow : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace medtune
