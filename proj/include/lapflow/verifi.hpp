#pragma once

#include <string>
#include <utility>
#include <vector>

#include "lapflow/encoder.hpp"

namespace lapflow {

// In-context rewriting: the encoder greedy-decodes a target prompt behind the
// original chat prefix, and only the rewritten tokens (plus image tokens in
// multimodal mode) are handed to the generator as conditioning.

struct ChatTemplate {
    std::string system_text;
};

struct ChatSequence {
    TokenSequence seq;
    std::pair<int, int> system_span{0, 0};  // text positions inside the markers
    std::pair<int, int> user_text_span{0, 0};
    std::vector<std::pair<int, int>> image_spans;  // embedding entries only, markers excluded
    int asst_open_pos = -1;
};

// Ordered spans: SYS_OPEN system SYS_CLOSE, USR_OPEN user_text [per image:
// IMG_PATCH_MARK patches IMG_THUMB_MARK thumb] USR_CLOSE, ASST_OPEN.
inline ChatSequence build_chat_sequence(const std::string& system, const std::string& user_text,
                                        const std::vector<TileSet>& images, const Vocabulary& vocab,
                                        int max_images = 4) {
    require(static_cast<int>(images.size()) <= max_images, "chat: too many images");
    ChatSequence out;
    TokenSequence& s = out.seq;
    s.push_text(vocab.sys_open(), Role::System);
    out.system_span.first = static_cast<int>(s.size());
    for (int id : tokenize_text(system, vocab)) s.push_text(id, Role::System);
    out.system_span.second = static_cast<int>(s.size());
    s.push_text(vocab.sys_close(), Role::System);

    s.push_text(vocab.usr_open(), Role::User);
    out.user_text_span.first = static_cast<int>(s.size());
    for (int id : tokenize_text(user_text, vocab)) s.push_text(id, Role::User);
    out.user_text_span.second = static_cast<int>(s.size());
    for (const TileSet& tiles : images) {
        auto spans = append_image_entries(s, tiles, vocab);
        out.image_spans.insert(out.image_spans.end(), spans.begin(), spans.end());
    }
    s.push_text(vocab.usr_close(), Role::User);

    out.asst_open_pos = static_cast<int>(s.size());
    s.push_text(vocab.asst_open(), Role::User);
    return out;
}

struct ParsedChat {
    std::string system;
    std::string user_text;
    int image_count = 0;
};

// Span-parses a rendered sequence back into its parts.
inline ParsedChat parse_chat_sequence(const TokenSequence& seq, const Vocabulary& vocab) {
    ParsedChat out;
    size_t i = 0;
    auto expect = [&](int id, const char* what) {
        require(i < seq.entries.size() && seq.entries[i].token_id == id,
                std::string("chat parse: expected ") + what);
        ++i;
    };
    expect(vocab.sys_open(), "SYS_OPEN");
    while (i < seq.entries.size() && seq.entries[i].token_id >= 0 &&
           seq.entries[i].token_id < vocab.v_text)
        out.system.push_back(vocab.char_of(seq.entries[i++].token_id));
    expect(vocab.sys_close(), "SYS_CLOSE");
    expect(vocab.usr_open(), "USR_OPEN");
    while (i < seq.entries.size() && seq.entries[i].token_id >= 0 &&
           seq.entries[i].token_id < vocab.v_text)
        out.user_text.push_back(vocab.char_of(seq.entries[i++].token_id));
    while (i < seq.entries.size() && seq.entries[i].token_id == vocab.img_patch_mark()) {
        ++out.image_count;
        ++i;
        while (i < seq.entries.size() && seq.entries[i].token_id < 0) ++i;  // patches
        expect(vocab.img_thumb_mark(), "IMG_THUMB_MARK");
        while (i < seq.entries.size() && seq.entries[i].token_id < 0) ++i;  // thumbnail
    }
    expect(vocab.usr_close(), "USR_CLOSE");
    expect(vocab.asst_open(), "ASST_OPEN");
    return out;
}

struct RewriteResult {
    TokenSequence full_sequence;            // system + user + rewritten spans
    std::pair<int, int> rewritten_span{0, 0};
    std::vector<std::pair<int, int>> image_spans;
    LayerStack layer_stack;                 // all layers over the full sequence
    std::vector<int> rewritten_ids;
    std::vector<LayerStack> step_stacks;    // per-token states at decode time
};

// Greedy-decodes up to max_new tokens (or EOS) behind the chat prefix. The
// rewritten tokens' hidden states are the ones computed with the original
// prompt in their causal context.
inline RewriteResult rewrite_in_context(const EncoderConfig& cfg, const EncoderWeights& w,
                                        const ChatSequence& chat, int max_new,
                                        const Vocabulary& vocab) {
    require(!chat.seq.entries.empty() &&
                chat.seq.entries.back().token_id == vocab.asst_open(),
            "rewrite: sequence must end at the assistant-open marker");
    DecodeResult dec = greedy_decode(chat.seq, max_new, cfg, w, vocab);
    RewriteResult out;
    out.full_sequence = chat.seq;
    for (int id : dec.ids) out.full_sequence.push_text(id, Role::Rewritten);
    out.rewritten_span = {static_cast<int>(chat.seq.size()),
                          static_cast<int>(chat.seq.size() + static_cast<int64_t>(dec.ids.size()))};
    out.image_spans = chat.image_spans;
    out.layer_stack = std::move(dec.final_stack);
    out.rewritten_ids = std::move(dec.ids);
    out.step_stacks = std::move(dec.step_stacks);
    return out;
}

// Teacher-forced variant: the rewritten span is supplied, not decoded. Used
// during generator training so rewriting quality is controlled.
inline RewriteResult rewrite_teacher_forced(const EncoderConfig& cfg, const EncoderWeights& w,
                                            const ChatSequence& chat,
                                            const std::vector<int>& rewritten_ids,
                                            bool with_states = true) {
    RewriteResult out;
    out.full_sequence = chat.seq;
    for (int id : rewritten_ids) out.full_sequence.push_text(id, Role::Rewritten);
    out.rewritten_span = {static_cast<int>(chat.seq.size()),
                          static_cast<int>(chat.seq.size() + static_cast<int64_t>(rewritten_ids.size()))};
    out.image_spans = chat.image_spans;
    out.rewritten_ids = rewritten_ids;
    if (with_states) out.layer_stack = encode(out.full_sequence, cfg, w).stack;
    return out;
}

enum class ConditioningMode { Text, Multimodal };

inline ConditioningMode conditioning_mode_from(const std::string& s) {
    if (s == "text") return ConditioningMode::Text;
    if (s == "multimodal") return ConditioningMode::Multimodal;
    throw std::invalid_argument("unknown conditioning mode: " + s);
}

struct ConditioningMask {
    std::vector<uint8_t> selected;  // per position of full_sequence

    std::vector<int> positions() const {
        std::vector<int> out;
        for (size_t i = 0; i < selected.size(); ++i)
            if (selected[i]) out.push_back(static_cast<int>(i));
        return out;
    }
};

// Mask is true exactly on the rewritten span, plus every image position
// (patches and thumbnail) in multimodal mode.
inline ConditioningMask conditioning_mask(const RewriteResult& r, ConditioningMode mode) {
    ConditioningMask m;
    m.selected.assign(static_cast<size_t>(r.full_sequence.size()), 0);
    for (int i = r.rewritten_span.first; i < r.rewritten_span.second; ++i)
        m.selected[static_cast<size_t>(i)] = 1;
    if (mode == ConditioningMode::Multimodal)
        for (const auto& span : r.image_spans)
            for (int i = span.first; i < span.second; ++i) m.selected[static_cast<size_t>(i)] = 1;
    return m;
}

inline std::pair<ConditioningMask, LayerStack> select_conditioning(const RewriteResult& r,
                                                                   ConditioningMode mode) {
    ConditioningMask m = conditioning_mask(r, mode);
    return {m, restrict_positions(r.layer_stack, m.positions())};
}

}  // namespace lapflow
