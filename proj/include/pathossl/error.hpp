#pragma once

#include <stdexcept>
#include <string>

namespace pathossl {

/// Base class for all library errors. The category maps onto CLI exit codes.
class Error : public std::runtime_error {
public:
    enum class Category { data = 2, divergence = 3 };

    explicit Error(const std::string& what, Category category = Category::data)
        : std::runtime_error(what), category_(category) {}

    Category category() const noexcept { return category_; }

private:
    Category category_;
};

class InvalidSpecError : public Error {
public:
    explicit InvalidSpecError(const std::string& what) : Error("invalid spec: " + what) {}
};

class BoundsError : public Error {
public:
    explicit BoundsError(const std::string& what) : Error("out of bounds: " + what) {}
};

class DomainError : public Error {
public:
    explicit DomainError(const std::string& what) : Error(what) {}
};

class ContractError : public Error {
public:
    explicit ContractError(const std::string& what) : Error("contract violation: " + what) {}
};

class IoError : public Error {
public:
    explicit IoError(const std::string& what) : Error("i/o error: " + what) {}
};

class ParseError : public Error {
public:
    ParseError(const std::string& file, std::size_t line, const std::string& what)
        : Error(file + ":" + std::to_string(line) + ": " + what) {}
    explicit ParseError(const std::string& what) : Error("parse error: " + what) {}
};

class DivergenceError : public Error {
public:
    explicit DivergenceError(const std::string& what)
        : Error("training diverged: " + what, Category::divergence) {}
};

}  // namespace pathossl
