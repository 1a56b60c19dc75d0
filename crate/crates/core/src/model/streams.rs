//! Row layout of the two streams and the attention masks derived from it.

use std::ops::Range;

use crate::attention::Mask;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    Appearance,
    Motion,
    Region,
    BoundaryType,
    Caption,
}

/// Which rows of a stream hold which input, plus row validity (padded region
/// rows are invalid and never used as keys).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamLayout {
    segments: Vec<(Segment, Range<usize>)>,
    valid: Vec<bool>,
}

impl StreamLayout {
    /// Builds a layout from `(segment, rows, validity)` parts in order.
    pub fn new(parts: &[(Segment, usize, Option<&[bool]>)]) -> Self {
        let mut segments = Vec::with_capacity(parts.len());
        let mut valid = Vec::new();
        for &(seg, rows, mask) in parts {
            let start = valid.len();
            match mask {
                Some(m) => valid.extend_from_slice(&m[..rows]),
                None => valid.extend(std::iter::repeat_n(true, rows)),
            }
            segments.push((seg, start..start + rows));
        }
        Self { segments, valid }
    }

    pub fn rows(&self) -> usize {
        self.valid.len()
    }

    pub fn segment(&self, seg: Segment) -> Option<Range<usize>> {
        self.segments.iter().find(|(s, _)| *s == seg).map(|(_, r)| r.clone())
    }

    pub fn segments(&self) -> &[(Segment, Range<usize>)] {
        &self.segments
    }

    pub fn caption_rows(&self) -> Range<usize> {
        self.segment(Segment::Caption).unwrap_or(self.rows()..self.rows())
    }

    /// Position within the caption prefix, if `row` is a caption row.
    pub fn caption_pos(&self, row: usize) -> Option<usize> {
        let r = self.caption_rows();
        r.contains(&row).then(|| row - r.start)
    }

    pub fn is_valid(&self, row: usize) -> bool {
        self.valid[row]
    }

    /// Self-attention mask: caption rows attend causally among themselves and
    /// to every valid feature row; feature rows attend valid feature rows only.
    pub fn self_mask(&self) -> Mask {
        Mask::from_fn(self.rows(), self.rows(), |i, j| {
            if !self.valid[j] {
                return false;
            }
            match (self.caption_pos(i), self.caption_pos(j)) {
                (_, None) => true,
                (Some(qi), Some(kj)) => kj <= qi,
                (None, Some(_)) => false,
            }
        })
    }

    /// Cross-attention mask with `self` as queries and `keys` as the other
    /// stream: only the other stream's valid feature rows are visible.
    pub fn cross_mask(&self, keys: &StreamLayout) -> Mask {
        Mask::from_fn(self.rows(), keys.rows(), |_, j| {
            keys.valid[j] && keys.caption_pos(j).is_none()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn local(regions_valid: &[bool], captions: usize) -> StreamLayout {
        StreamLayout::new(&[
            (Segment::Region, regions_valid.len(), Some(regions_valid)),
            (Segment::BoundaryType, 1, None),
            (Segment::Caption, captions, None),
        ])
    }

    #[test]
    fn caption_rows_trail() {
        let l = local(&[true; 10], 3);
        assert_eq!(l.rows(), 14);
        assert_eq!(l.caption_rows(), 11..14);
        assert_eq!(l.caption_pos(12), Some(1));
        assert_eq!(l.caption_pos(10), None);
    }

    #[test]
    fn self_mask_is_causal_and_hides_captions_from_features() {
        let l = local(&[true, true, false], 3);
        let m = l.self_mask();
        // feature rows never see caption rows
        for i in 0..4 {
            for j in 4..7 {
                assert!(!m.allows(i, j));
            }
        }
        // padded region is never a key
        for i in 0..7 {
            assert!(!m.allows(i, 2));
        }
        assert!(m.allows(5, 4) && m.allows(5, 5) && !m.allows(5, 6));
        assert!(m.allows(6, 0) && m.allows(6, 3));
        m.check_rows_nonempty("test").unwrap();
    }

    #[test]
    fn cross_mask_only_sees_other_features() {
        let l = local(&[true, false], 2);
        let g = StreamLayout::new(&[
            (Segment::Appearance, 2, None),
            (Segment::Motion, 1, None),
            (Segment::BoundaryType, 1, None),
            (Segment::Caption, 2, None),
        ]);
        let lg = l.cross_mask(&g);
        assert!((0..l.rows()).all(|i| (0..4).all(|j| lg.allows(i, j)) && !lg.allows(i, 4) && !lg.allows(i, 5)));
        let gl = g.cross_mask(&l);
        assert!((0..g.rows()).all(|i| gl.allows(i, 0) && !gl.allows(i, 1) && gl.allows(i, 2) && !gl.allows(i, 3)));
    }
}
