//! A 5x9 bitmap font covering the native and variant alphabets.
//!
//! Rows 0-1 hold ascenders, rows 2-6 the x-height band and rows 7-8
//! descenders. Each `#` is a stroke node; the renderer joins 8-connected
//! nodes into pen strokes.

pub const GLYPH_COLS: usize = 5;
pub const GLYPH_ROWS: usize = 9;
/// Row index of the baseline (bottom of the x-height band).
pub const BASELINE_ROW: usize = 6;

const FONT: &[(char, [&str; GLYPH_ROWS])] = &[
    ('a', [".....", ".....", ".###.", "....#", ".####", "#...#", ".####", ".....", "....."]),
    ('b', ["#....", "#....", "####.", "#...#", "#...#", "#...#", "####.", ".....", "....."]),
    ('c', [".....", ".....", ".###.", "#....", "#....", "#....", ".###.", ".....", "....."]),
    ('d', ["....#", "....#", ".####", "#...#", "#...#", "#...#", ".####", ".....", "....."]),
    ('e', [".....", ".....", ".###.", "#...#", "#####", "#....", ".###.", ".....", "....."]),
    ('f', ["..##.", ".#...", "###..", ".#...", ".#...", ".#...", ".#...", ".....", "....."]),
    ('g', [".....", ".....", ".####", "#...#", "#...#", ".####", "....#", "....#", ".###."]),
    ('h', ["#....", "#....", "####.", "#...#", "#...#", "#...#", "#...#", ".....", "....."]),
    ('i', ["..#..", ".....", ".##..", "..#..", "..#..", "..#..", ".###.", ".....", "....."]),
    ('j', ["...#.", ".....", "..##.", "...#.", "...#.", "...#.", "...#.", "#..#.", ".##.."]),
    ('k', ["#....", "#....", "#..#.", "#.#..", "##...", "#.#..", "#..#.", ".....", "....."]),
    ('l', [".##..", "..#..", "..#..", "..#..", "..#..", "..#..", ".###.", ".....", "....."]),
    ('m', [".....", ".....", "##.#.", "#.#.#", "#.#.#", "#.#.#", "#.#.#", ".....", "....."]),
    ('n', [".....", ".....", "####.", "#...#", "#...#", "#...#", "#...#", ".....", "....."]),
    ('o', [".....", ".....", ".###.", "#...#", "#...#", "#...#", ".###.", ".....", "....."]),
    ('p', [".....", ".....", "####.", "#...#", "#...#", "####.", "#....", "#....", "#...."]),
    ('q', [".....", ".....", ".####", "#...#", "#...#", ".####", "....#", "....#", "....#"]),
    ('r', [".....", ".....", "#.##.", "##..#", "#....", "#....", "#....", ".....", "....."]),
    ('s', [".....", ".....", ".####", "#....", ".###.", "....#", "####.", ".....", "....."]),
    ('t', [".#...", ".#...", "####.", ".#...", ".#...", ".#..#", "..##.", ".....", "....."]),
    ('u', [".....", ".....", "#...#", "#...#", "#...#", "#..##", ".##.#", ".....", "....."]),
    ('v', [".....", ".....", "#...#", "#...#", "#...#", ".#.#.", "..#..", ".....", "....."]),
    ('w', [".....", ".....", "#...#", "#...#", "#.#.#", "#.#.#", ".#.#.", ".....", "....."]),
    ('x', [".....", ".....", "#...#", ".#.#.", "..#..", ".#.#.", "#...#", ".....", "....."]),
    ('y', [".....", ".....", "#...#", "#...#", "#...#", ".####", "....#", "....#", ".###."]),
    ('z', [".....", ".....", "#####", "...#.", "..#..", ".#...", "#####", ".....", "....."]),
    ('.', [".....", ".....", ".....", ".....", ".....", "..##.", "..##.", ".....", "....."]),
    (',', [".....", ".....", ".....", ".....", ".....", "..##.", "..##.", "...#.", "..#.."]),
    (' ', [".....", ".....", ".....", ".....", ".....", ".....", ".....", ".....", "....."]),
    // Historic variants.
    ('ſ', ["..##.", ".#...", ".#...", ".#...", ".#...", ".#...", ".#...", ".#...", "#...."]),
    ('ꝛ', [".....", ".....", "###..", "...#.", "...#.", "..#..", "####.", ".....", "....."]),
    ('ꝺ', ["#....", ".#...", "..##.", ".#..#", "#...#", "#...#", ".###.", ".....", "....."]),
    ('ů', [".##..", ".##..", "#...#", "#...#", "#...#", "#..##", ".##.#", ".....", "....."]),
];

/// Stroke nodes `(col, row)` of `ch`, or `None` if the font lacks it.
pub fn glyph_nodes(ch: char) -> Option<Vec<(usize, usize)>> {
    let (_, rows) = FONT.iter().find(|(c, _)| *c == ch)?;
    let mut nodes = Vec::new();
    for (r, row) in rows.iter().enumerate() {
        for (c, b) in row.bytes().enumerate() {
            if b == b'#' {
                nodes.push((c, r));
            }
        }
    }
    Some(nodes)
}

/// Index pairs of 8-connected nodes. Diagonals are dropped when both
/// orthogonal neighbours exist, which avoids filled triangles.
pub fn glyph_edges(nodes: &[(usize, usize)]) -> Vec<(usize, usize)> {
    let has = |c: usize, r: usize| nodes.iter().any(|&n| n == (c, r));
    let mut edges = Vec::new();
    for (i, &(c, r)) in nodes.iter().enumerate() {
        for (j, &(c2, r2)) in nodes.iter().enumerate().skip(i + 1) {
            let dc = c2 as isize - c as isize;
            let dr = r2 as isize - r as isize;
            if dc.abs() > 1 || dr.abs() > 1 {
                continue;
            }
            if dc != 0 && dr != 0 && (has(c2, r) || has(c, r2)) {
                continue;
            }
            edges.push((i, j));
        }
    }
    edges
}

pub fn has_glyph(ch: char) -> bool {
    FONT.iter().any(|(c, _)| *c == ch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::charset::CharsetSpec;

    #[test]
    fn font_covers_default_charset_with_distinct_shapes() {
        let cs = CharsetSpec::default();
        let mut seen = Vec::new();
        for ch in cs.chars() {
            let nodes = glyph_nodes(ch).unwrap_or_else(|| panic!("no glyph for {ch:?}"));
            assert!(ch == ' ' || !nodes.is_empty());
            assert!(!seen.contains(&nodes), "{ch:?} duplicates another glyph");
            seen.push(nodes);
        }
    }
}
