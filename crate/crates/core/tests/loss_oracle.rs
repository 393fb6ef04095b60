use mum_core::bbox::{Annotation, BBox};
use mum_core::detector::{detection_loss, DenseDetections, LossConfig};
use mum_core::Tensor4;

/// Hand-rolled scalar version of the detection loss for one image.
fn scalar_loss(logits: &[[f64; 3]; 4], offsets: &[[f64; 4]; 4], positive: Option<(usize, usize, [f64; 4])>) -> (f64, f64) {
    let (alpha, gamma) = (0.25f64, 2.0f64);
    let mut cls = 0.0;
    for (cell, ls) in logits.iter().enumerate() {
        for (c, &z) in ls.iter().enumerate() {
            let p = 1.0 / (1.0 + (-z).exp());
            let is_pos = positive.is_some_and(|(pc, cls_id, _)| pc == cell && cls_id == c);
            cls += if is_pos {
                -alpha * (1.0 - p).powf(gamma) * p.ln()
            } else {
                -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln()
            };
        }
    }
    let mut reg = 0.0;
    if let Some((cell, _, target)) = positive {
        for d in 0..4 {
            let r = (offsets[cell][d] - target[d]).abs();
            reg += if r < 1.0 { 0.5 * r * r } else { r - 0.5 };
        }
    }
    (cls, reg)
}

#[test]
fn two_by_two_grid_matches_scalar_oracle() {
    // 16x16 image, stride 8: cell centers at (4,4), (12,4), (4,12), (12,12).
    // One box [9,1,15,9] contains only the center (12,4) -> cell 1.
    let logits = [[-2.0, 0.3, -1.0], [0.8, -0.5, 1.7], [-3.0, -3.0, 0.1], [2.0, -0.2, -4.0]];
    let offsets = [[0.1, 0.2, 0.0, -0.1], [0.4, -1.6, 0.9, -0.3], [0.0; 4], [1.0, 1.0, 1.0, 1.0]];
    let gt = Annotation {
        class_id: 2,
        bbox: BBox::new(9.0, 1.0, 15.0, 9.0).unwrap(),
    };
    // center (12, 5), size 6x8 -> ((12-12)/8, (5-4)/8, ln(6/8), ln(8/8))
    let target = [0.0, 0.125, (0.75f64).ln(), 0.0];
    let mut map = Tensor4::<f64>::zeros([1, 7, 2, 2]);
    for cell in 0..4 {
        let (y, x) = (cell / 2, cell % 2);
        for c in 0..3 {
            map.set(0, c, y, x, logits[cell][c]);
        }
        for d in 0..4 {
            map.set(0, 3 + d, y, x, offsets[cell][d]);
        }
    }
    let pred = DenseDetections::new(map, 3, 8).unwrap();
    let got = detection_loss(&pred, &[vec![gt]], &LossConfig::default()).unwrap();
    let (cls, reg) = scalar_loss(&logits, &offsets, Some((1, 2, target)));
    assert_eq!(got.n_pos, 1);
    assert!((got.l_cls - cls).abs() < 1e-12, "{} vs {cls}", got.l_cls);
    assert!((got.l_reg - reg).abs() < 1e-12, "{} vs {reg}", got.l_reg);

    let none: Vec<Vec<Annotation>> = vec![vec![]];
    let bg = detection_loss(&pred, &none, &LossConfig::default()).unwrap();
    let (cls, _) = scalar_loss(&logits, &offsets, None);
    assert!((bg.l_cls - cls).abs() < 1e-12);
    assert_eq!(bg.l_reg, 0.0);
}

#[test]
fn loss_is_finite_and_non_negative_on_extreme_logits() {
    let map = Tensor4::from_fn([2, 7, 2, 2], |[n, c, y, x]| ((n + c * 3 + y * 5 + x) as f64 - 10.0) * 40.0);
    let pred = DenseDetections::new(map, 3, 8).unwrap();
    let gts = vec![vec![Annotation { class_id: 0, bbox: BBox::new(0.0, 0.0, 16.0, 16.0).unwrap() }], vec![]];
    let t = detection_loss(&pred, &gts, &LossConfig::default()).unwrap();
    assert!(t.l_cls.is_finite() && t.l_cls >= 0.0);
    assert!(t.l_reg.is_finite() && t.l_reg >= 0.0);
}
