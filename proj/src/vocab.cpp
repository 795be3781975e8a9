#include "ktr/vocab.hpp"

#include <array>
#include <stdexcept>

namespace ktr {

namespace {
constexpr std::array<std::string_view, kQuestionWordCount> kQuestionNames{"majority", "first", "after", "sum"};
constexpr std::array<std::string_view, kConnectiveCount> kConnectiveNames{"then", "so", "wait", "because", "first", "next"};
constexpr std::array<std::string_view, 3> kMarkerNames{"<think>", "<ans>", "<eos>"};
}  // namespace

std::string_view category_name(TokenCategory category) {
    switch (category) {
        case TokenCategory::FrameSymbol: return "frame-symbol";
        case TokenCategory::QuestionWord: return "question-word";
        case TokenCategory::Connective: return "connective";
        case TokenCategory::Digit: return "digit";
        case TokenCategory::Marker: return "marker";
        case TokenCategory::Other: return "other";
    }
    return "other";
}

Vocabulary::Vocabulary(std::size_t frame_vocab) : frame_vocab_(frame_vocab) {
    if (frame_vocab < 4) {
        throw std::invalid_argument("frame vocabulary must have at least 4 symbols");
    }
}

TokenId Vocabulary::symbol(std::size_t s) const {
    if (s >= frame_vocab_) {
        throw std::out_of_range("frame symbol out of range");
    }
    return static_cast<TokenId>(s);
}

TokenId Vocabulary::digit(std::size_t d) const {
    if (d >= kDigitCount) {
        throw std::out_of_range("digit out of range");
    }
    return static_cast<TokenId>(frame_vocab_ + d);
}

TokenId Vocabulary::question(QuestionWord q) const {
    return static_cast<TokenId>(frame_vocab_ + kDigitCount + static_cast<std::size_t>(q));
}

TokenId Vocabulary::connective(std::size_t c) const {
    if (c >= kConnectiveCount) {
        throw std::out_of_range("connective out of range");
    }
    return static_cast<TokenId>(frame_vocab_ + kDigitCount + kQuestionWordCount + c);
}

TokenCategory Vocabulary::category(TokenId id) const {
    std::size_t i = id;
    if (i < frame_vocab_) return TokenCategory::FrameSymbol;
    i -= frame_vocab_;
    if (i < kDigitCount) return TokenCategory::Digit;
    i -= kDigitCount;
    if (i < kQuestionWordCount) return TokenCategory::QuestionWord;
    i -= kQuestionWordCount;
    if (i < kConnectiveCount) return TokenCategory::Connective;
    i -= kConnectiveCount;
    if (i < kMarkerNames.size()) return TokenCategory::Marker;
    return TokenCategory::Other;
}

std::string Vocabulary::token_name(TokenId id) const {
    std::size_t i = id;
    if (i == 0) return "<null>";
    if (i < frame_vocab_) return "s" + std::to_string(i);
    i -= frame_vocab_;
    if (i < kDigitCount) return std::to_string(i);
    i -= kDigitCount;
    if (i < kQuestionWordCount) return std::string(kQuestionNames[i]);
    i -= kQuestionWordCount;
    if (i < kConnectiveCount) return std::string(kConnectiveNames[i]);
    i -= kConnectiveCount;
    if (i < kMarkerNames.size()) return std::string(kMarkerNames[i]);
    return "<unk:" + std::to_string(id) + ">";
}

}  // namespace ktr
