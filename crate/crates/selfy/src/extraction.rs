//! Feature-extraction heads (placeholder during bring-up).
