#pragma once

#include <stdexcept>
#include <string>

namespace fame {

/// Base of every error raised by the library. The category maps onto the
/// CLI exit codes: usage/config (1), data (2), numerical (3).
class Error : public std::runtime_error {
public:
    enum class Category { config = 1, data = 2, numerical = 3 };

    Error(Category category, const std::string& what)
        : std::runtime_error(what), category_(category) {}

    Category category() const noexcept { return category_; }
    int exit_code() const noexcept { return static_cast<int>(category_); }

private:
    Category category_;
};

class DimensionError : public Error {
public:
    explicit DimensionError(const std::string& what) : Error(Category::numerical, what) {}
};

class IndexError : public Error {
public:
    explicit IndexError(const std::string& what) : Error(Category::data, what) {}
};

class ContractError : public Error {
public:
    explicit ContractError(const std::string& what) : Error(Category::numerical, what) {}
};

class DegenerateRowError : public Error {
public:
    explicit DegenerateRowError(const std::string& what) : Error(Category::numerical, what) {}
};

class DivergenceError : public Error {
public:
    explicit DivergenceError(const std::string& what) : Error(Category::numerical, what) {}
};

class ParameterError : public Error {
public:
    explicit ParameterError(const std::string& what) : Error(Category::config, what) {}
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& what) : Error(Category::config, what) {}
};

class IoError : public Error {
public:
    explicit IoError(const std::string& what) : Error(Category::data, what) {}
};

class FormatError : public Error {
public:
    explicit FormatError(const std::string& what) : Error(Category::data, what) {}
};

class EmptyDatasetError : public Error {
public:
    explicit EmptyDatasetError(const std::string& what) : Error(Category::data, what) {}
};

class IncompatibleError : public Error {
public:
    explicit IncompatibleError(const std::string& what) : Error(Category::config, what) {}
};

}  // namespace fame
