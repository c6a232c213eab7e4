use crate::error::{Error, Result};

/// Overlap `2|M∩G| / (|M| + |G|)`; two empty masks agree perfectly (1).
pub fn dice(m: &[bool], g: &[bool]) -> Result<f64> {
    if m.len() != g.len() {
        return Err(Error::Shape(format!("dice of {} vs {} voxels", m.len(), g.len())));
    }
    let (mut inter, mut sm, mut sg) = (0usize, 0usize, 0usize);
    for (&a, &b) in m.iter().zip(g) {
        inter += usize::from(a && b);
        sm += usize::from(a);
        sg += usize::from(b);
    }
    Ok(if sm + sg == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (sm + sg) as f64
    })
}
