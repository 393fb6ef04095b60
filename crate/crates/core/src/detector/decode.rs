use crate::bbox::BBox;
use crate::teacher::{nms, PseudoLabel};
use crate::tensor::Scalar;

use super::loss::cell_center;
use super::model::DenseDetections;

/// Largest log-size offset decoded; keeps `exp` finite on wild predictions.
const MAX_LOG_SIZE: f64 = 8.0;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Turns the dense map into per-image scored boxes.
///
/// Every (cell, class) pair with `sigmoid(logit) >= score_floor` yields a box
/// decoded from the cell's offsets and clipped to the image; each image's list
/// then goes through class-wise NMS.
pub fn decode_detections<T: Scalar>(pred: &DenseDetections<T>, score_floor: f32, nms_iou: f32) -> Vec<Vec<PseudoLabel>> {
    let map = &pred.map;
    let side = pred.side();
    let k = pred.num_classes;
    let s = pred.stride as f64;
    let limit = pred.image_size() as f64;
    (0..map.batch())
        .map(|n| {
            let mut dets = Vec::new();
            for row in 0..side {
                for col in 0..side {
                    let (cx, cy) = cell_center(row, col, pred.stride);
                    let mut bbox: Option<Option<BBox>> = None;
                    for c in 0..k {
                        let score = sigmoid(map.get(n, c, row, col).as_f64()) as f32;
                        if score < score_floor {
                            continue;
                        }
                        let b = *bbox.get_or_insert_with(|| {
                            let d: Vec<f64> = (0..4).map(|i| map.get(n, k + i, row, col).as_f64()).collect();
                            let bx = cx + d[0] * s;
                            let by = cy + d[1] * s;
                            let w = s * d[2].min(MAX_LOG_SIZE).exp();
                            let h = s * d[3].min(MAX_LOG_SIZE).exp();
                            let x0 = (bx - 0.5 * w).clamp(0.0, limit) as f32;
                            let x1 = (bx + 0.5 * w).clamp(0.0, limit) as f32;
                            let y0 = (by - 0.5 * h).clamp(0.0, limit) as f32;
                            let y1 = (by + 0.5 * h).clamp(0.0, limit) as f32;
                            BBox::new(x0, y0, x1, y1).ok()
                        });
                        if let Some(bbox) = b {
                            dets.push(PseudoLabel {
                                class_id: c,
                                score: score.clamp(0.0, 1.0),
                                bbox,
                            });
                        }
                    }
                }
            }
            nms(&dets, nms_iou)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor4;

    #[test]
    fn background_and_unreachable_floor_give_nothing() {
        let pred = DenseDetections::new(Tensor4::<f32>::full([2, 7, 4, 4], -20.0), 3, 8).unwrap();
        assert!(decode_detections(&pred, 0.05, 0.5).iter().all(|d| d.is_empty()));
        let hot = DenseDetections::new(Tensor4::<f32>::full([1, 7, 4, 4], 20.0), 3, 8).unwrap();
        assert!(decode_detections(&hot, 1.1, 0.5)[0].is_empty());
    }

    #[test]
    fn single_strong_cell_decodes_by_hand() {
        let mut map = Tensor4::<f64>::full([1, 7, 4, 4], -20.0);
        // cell (row 1, col 2): center (20, 12); offsets (0.5, -0.25, ln 2, 0)
        map.set(0, 2, 1, 2, 3.0);
        map.set(0, 3, 1, 2, 0.5);
        map.set(0, 4, 1, 2, -0.25);
        map.set(0, 5, 1, 2, 2f64.ln());
        map.set(0, 6, 1, 2, 0.0);
        let pred = DenseDetections::new(map, 3, 8).unwrap();
        let dets = decode_detections(&pred, 0.5, 0.5);
        assert_eq!(dets[0].len(), 1);
        let d = dets[0][0];
        assert_eq!(d.class_id, 2);
        assert!((d.score as f64 - 1.0 / (1.0 + (-3.0f64).exp())).abs() < 1e-6);
        // center (24, 10), size 16 x 8
        let want = [16.0, 6.0, 32.0, 14.0];
        let got: [f32; 4] = d.bbox.into();
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-4, "{got:?}");
        }
    }
}
