#include "mdt/attention_trace.h"

#include <string>

#include "mdt/parameters.h"

namespace mdt {

namespace {

constexpr AttentionKind kAllKinds[] = {AttentionKind::image_self, AttentionKind::text_self,
                                       AttentionKind::image_to_text, AttentionKind::text_to_image,
                                       AttentionKind::unified};

AttentionKind kind_from_name(std::string_view name) {
  for (auto k : kAllKinds) {
    if (attention_kind_name(k) == name) return k;
  }
  throw IoError("unknown attention kind '" + std::string(name) + "'");
}

Tensor tags_tensor(const std::vector<Modality>& tags) {
  std::vector<real> v(tags.size());
  for (std::size_t i = 0; i < tags.size(); ++i) v[i] = static_cast<real>(static_cast<int>(tags[i]));
  return tags.empty() ? Tensor() : Tensor::from({tags.size()}, std::move(v));
}

std::vector<Modality> tags_from(const Tensor& t) {
  std::vector<Modality> tags;
  for (real v : t.data()) {
    const int code = static_cast<int>(v);
    if (code < 0 || code > static_cast<int>(Modality::cls)) throw IoError("bad modality tag in trace");
    tags.push_back(static_cast<Modality>(code));
  }
  return tags;
}

}  // namespace

std::string_view attention_kind_name(AttentionKind kind) {
  switch (kind) {
    case AttentionKind::image_self: return "image_self";
    case AttentionKind::text_self: return "text_self";
    case AttentionKind::image_to_text: return "image_to_text";
    case AttentionKind::text_to_image: return "text_to_image";
    case AttentionKind::unified: return "unified";
  }
  return "?";
}

std::vector<const AttentionRecord*> AttentionTrace::of_kind(AttentionKind kind) const {
  std::vector<const AttentionRecord*> out;
  for (const auto& r : records) {
    if (r.kind == kind) out.push_back(&r);
  }
  return out;
}

std::vector<char> encode_trace(const AttentionTrace& trace) {
  std::vector<NamedTensor> entries;
  for (const auto& r : trace.records) {
    entries.push_back({std::to_string(r.block) + "/" + std::string(attention_kind_name(r.kind)), r.weights});
  }
  if (!trace.unified_tags.empty()) entries.push_back({"unified_tags", tags_tensor(trace.unified_tags)});
  if (!trace.text_tags.empty()) entries.push_back({"text_tags", tags_tensor(trace.text_tags)});
  const double cls = trace.cls_index ? static_cast<double>(*trace.cls_index) : -1.0;
  entries.push_back({"cls_index", Tensor::from({1}, {static_cast<real>(cls)})});
  entries.push_back({"grid_side", Tensor::from({1}, {static_cast<real>(trace.grid_side)})});
  entries.push_back({"slices", Tensor::from({1}, {static_cast<real>(trace.slices)})});
  return encode_container(kAttentionMagic, entries);
}

AttentionTrace decode_trace(const std::vector<char>& bytes) {
  AttentionTrace trace;
  for (auto& e : decode_container(kAttentionMagic, bytes)) {
    if (e.name == "unified_tags") {
      trace.unified_tags = tags_from(e.value);
    } else if (e.name == "text_tags") {
      trace.text_tags = tags_from(e.value);
    } else if (e.name == "cls_index") {
      const real v = e.value.data()[0];
      if (v >= 0) trace.cls_index = static_cast<std::size_t>(v);
    } else if (e.name == "grid_side") {
      trace.grid_side = static_cast<std::size_t>(e.value.data()[0]);
    } else if (e.name == "slices") {
      trace.slices = static_cast<std::size_t>(e.value.data()[0]);
    } else {
      const auto slash = e.name.find('/');
      if (slash == std::string::npos) throw IoError("unexpected trace entry '" + e.name + "'");
      if (e.value.rank() != 3) throw IoError("trace entry '" + e.name + "' is not [B x Nq x Nk]");
      AttentionRecord r;
      r.block = std::stoul(e.name.substr(0, slash));
      r.kind = kind_from_name(std::string_view(e.name).substr(slash + 1));
      r.weights = e.value;
      trace.records.push_back(std::move(r));
    }
  }
  return trace;
}

}  // namespace mdt
