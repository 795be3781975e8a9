#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>

namespace ktr {

using TokenId = std::uint32_t;

enum class TokenCategory : std::uint8_t { FrameSymbol, QuestionWord, Connective, Digit, Marker, Other };

inline constexpr std::size_t kTokenCategoryCount = 6;
std::string_view category_name(TokenCategory category);

enum class QuestionWord : std::uint8_t { Majority, FirstSlot, After, Sum };
inline constexpr std::size_t kQuestionWordCount = 4;
inline constexpr std::size_t kConnectiveCount = 6;
inline constexpr std::size_t kDigitCount = 10;

/// Token layout shared by the environment and the policy.
///
///   [0, V_f)            frame symbols; id 0 is the reserved null symbol
///   [V_f, V_f+10)       digits 0-9
///   next 4              question words
///   next 6              connectives (reasoning filler)
///   <think> <ans> <eos> markers
class Vocabulary {
  public:
    explicit Vocabulary(std::size_t frame_vocab);

    std::size_t frame_vocab() const { return frame_vocab_; }
    std::size_t size() const { return frame_vocab_ + kDigitCount + kQuestionWordCount + kConnectiveCount + 3; }

    static constexpr TokenId null_symbol() { return 0; }
    TokenId symbol(std::size_t s) const;
    TokenId digit(std::size_t d) const;
    TokenId question(QuestionWord q) const;
    TokenId connective(std::size_t c) const;
    TokenId think() const { return static_cast<TokenId>(marker_base() + 0); }
    TokenId answer_marker() const { return static_cast<TokenId>(marker_base() + 1); }
    TokenId eos() const { return static_cast<TokenId>(marker_base() + 2); }

    bool contains(TokenId id) const { return id < size(); }
    bool is_symbol(TokenId id) const { return id < frame_vocab_; }
    bool is_digit(TokenId id) const { return id >= frame_vocab_ && id < frame_vocab_ + kDigitCount; }
    std::size_t digit_value(TokenId id) const { return id - frame_vocab_; }

    /// Category of a token id; ids outside the vocabulary are Other.
    TokenCategory category(TokenId id) const;
    std::string token_name(TokenId id) const;

  private:
    std::size_t marker_base() const {
        return frame_vocab_ + kDigitCount + kQuestionWordCount + kConnectiveCount;
    }
    std::size_t frame_vocab_;
};

}  // namespace ktr
