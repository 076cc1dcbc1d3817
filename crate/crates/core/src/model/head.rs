use serde::{Deserialize, Serialize};

use crate::model::Task;
use crate::tensor::Tensor;

/// One decoded object: class id, confidence and `(x1, y1, x2, y2)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class: usize,
    pub score: f32,
    pub bbox: [f32; 4],
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Decodes a detection head's raw output.
///
/// Per box row `(tx, ty, tw, th, ts, class logits...)`: the centre is
/// `sigmoid(tx) * width`, `sigmoid(ty) * height`; the extent is
/// `(0.1 + 0.4 * sigmoid(tw)) * width` (same for height), so finite rows
/// always give `x1 < x2` and `y1 < y2`. Score is `sigmoid(ts)`; class is the
/// first arg-max of the class logits. Non-finite inputs decode to
/// non-finite boxes. Returns an empty list for classification tasks.
pub fn decode_detections(output: &Tensor, task: Task, height: usize, width: usize) -> Vec<Detection> {
    let Task::Detection { boxes, classes } = task else {
        return Vec::new();
    };
    let stride = 5 + classes;
    let (w, h) = (width as f32, height as f32);
    output
        .data()
        .chunks_exact(stride)
        .take(boxes)
        .map(|row| {
            let cx = sigmoid(row[0]) * w;
            let cy = sigmoid(row[1]) * h;
            let bw = (0.1 + 0.4 * sigmoid(row[2])) * w;
            let bh = (0.1 + 0.4 * sigmoid(row[3])) * h;
            let mut class = 0;
            for (c, &v) in row[5..].iter().enumerate() {
                if v > row[5 + class] {
                    class = c;
                }
            }
            Detection {
                class,
                score: sigmoid(row[4]),
                bbox: [cx - bw / 2.0, cy - bh / 2.0, cx + bw / 2.0, cy + bh / 2.0],
            }
        })
        .collect()
}
