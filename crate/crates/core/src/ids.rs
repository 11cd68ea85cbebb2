//! Deterministic identifiers.
//!
//! Every entity a daemon creates gets an id derived from its parent, so a
//! re-executed step after a crash collides with what was already written
//! instead of producing a duplicate.

/// Separator between an id's root and its derived suffix.
pub const SEP: char = '~';

/// 64-bit FNV-1a. Stable across platforms and toolchains.
pub fn fnv1a64(parts: &[&str]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for (i, p) in parts.iter().enumerate() {
        if i > 0 {
            h ^= 0x1f;
            h = h.wrapping_mul(PRIME);
        }
        for b in p.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(PRIME);
        }
    }
    h
}

/// The part of a work id before its first separator.
pub fn root_of(id: &str) -> &str {
    id.split(SEP).next().unwrap_or(id)
}

pub fn entry_work_id(root: &str, template_index: usize) -> String {
    format!("{root}{SEP}e{template_index}")
}

pub fn child_work_id(parent: &str, branch: usize, dest: usize) -> String {
    let h = fnv1a64(&[parent, &branch.to_string(), &dest.to_string()]);
    format!("{}{SEP}{h:016x}", root_of(parent))
}

pub fn input_collection_id(work_id: &str) -> String {
    format!("{work_id}{SEP}in")
}

pub fn output_collection_id(work_id: &str) -> String {
    format!("{work_id}{SEP}out")
}

pub fn content_id(collection_id: &str, index: usize) -> String {
    format!("{collection_id}{SEP}{index:06}")
}

/// File index of a content id.
pub fn content_index(content_id: &str) -> Option<usize> {
    content_id.rsplit_once(SEP)?.1.parse().ok()
}

pub fn processing_id(work_id: &str) -> String {
    format!("{work_id}{SEP}p")
}
