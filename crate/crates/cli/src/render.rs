//! Text renderings of masks and layouts.

use std::fmt::Write as _;

use regstream_core::{AttentionMask, ChunkLayout};

pub const ALLOWED: char = '#';
pub const BLOCKED: char = '.';

/// One line per query, `#` where the key is visible and `.` where masked.
pub fn mask_ascii(mask: &AttentionMask) -> String {
    let mut s = String::with_capacity(mask.size() * (mask.size() + 1));
    for q in 0..mask.size() {
        s.extend(
            mask.row(q)
                .iter()
                .map(|&a| if a { ALLOWED } else { BLOCKED }),
        );
        s.push('\n');
    }
    s
}

/// Comma-separated 0/1 grid, one line per query.
pub fn mask_csv(mask: &AttentionMask) -> String {
    let mut s = String::new();
    for q in 0..mask.size() {
        let line: Vec<&str> = mask
            .row(q)
            .iter()
            .map(|&a| if a { "1" } else { "0" })
            .collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

/// Parses either rendering back into a mask.
pub fn parse_mask(text: &str) -> Option<AttentionMask> {
    let rows: Vec<Vec<bool>> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            if l.contains(',') {
                l.split(',')
                    .map(|v| match v.trim() {
                        "1" => Some(true),
                        "0" => Some(false),
                        _ => None,
                    })
                    .collect()
            } else {
                l.chars()
                    .map(|c| match c {
                        ALLOWED => Some(true),
                        BLOCKED => Some(false),
                        _ => None,
                    })
                    .collect()
            }
        })
        .collect::<Option<_>>()?;
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return None;
    }
    Some(AttentionMask::from_fn(n, |q, k| rows[q][k]))
}

/// `position kind chunk time` per slot; `-` for registers' time, and the
/// register index is appended as `r<k>`.
pub fn layout_dump(layout: &ChunkLayout) -> String {
    let mut s = String::new();
    for (p, slot) in layout.slots().iter().enumerate() {
        let time = match (slot.time, slot.register_index) {
            (Some(t), _) => t.to_string(),
            (None, Some(k)) => format!("r{k}"),
            (None, None) => "-".to_string(),
        };
        let _ = writeln!(s, "{p} {} {} {time}", slot.kind.name(), slot.chunk);
    }
    s
}
