//! Scene-level panoptic quality: segments are unioned across views by their
//! consistent ID before matching, so an ID that changes between views costs
//! quality even when every single view looks right.
//!
//! `cargo run --release --example pq_eval`

use probfuse::metrics::{evaluate_masks, PanopticMask};
use probfuse::Result;

fn square(w: usize, h: usize, boxes: &[(usize, usize, usize, u32, u32)]) -> PanopticMask {
    let mut m = PanopticMask::background(w, h);
    for &(x0, y0, s, class, id) in boxes {
        for y in y0..y0 + s {
            for x in x0..x0 + s {
                m.semantic[y * w + x] = class;
                m.instance[y * w + x] = id;
            }
        }
    }
    m
}

fn main() -> Result<()> {
    let gt = vec![
        square(16, 16, &[(1, 1, 5, 1, 1), (9, 9, 6, 2, 2)]),
        square(16, 16, &[(2, 1, 5, 1, 1), (8, 8, 6, 2, 2)]),
    ];
    let report = |name: &str, pred: &[PanopticMask]| -> Result<()> {
        let r = evaluate_masks(pred, &gt)?;
        println!("{name:<22} PQ {:.4}  SQ {:.4}  RQ {:.4}  tp {} fp {} fn {}", r.pq, r.sq, r.rq, r.n_tp, r.n_fp, r.n_fn);
        Ok(())
    };
    report("perfect", &gt)?;

    let relabeled: Vec<PanopticMask> = gt
        .iter()
        .map(|m| PanopticMask {
            instance: m.instance.iter().map(|&i| if i == 0 { 0 } else { 10 + i }).collect(),
            ..m.clone()
        })
        .collect();
    report("consistent relabeling", &relabeled)?;

    let mut swapped = gt.clone();
    swapped[1] = square(16, 16, &[(2, 1, 5, 1, 3), (8, 8, 6, 2, 2)]);
    report("inconsistent id", &swapped)?;

    let mut shrunk = gt.clone();
    shrunk[0] = square(16, 16, &[(1, 1, 4, 1, 1), (9, 9, 6, 2, 2)]);
    report("one shrunken mask", &shrunk)?;
    Ok(())
}
