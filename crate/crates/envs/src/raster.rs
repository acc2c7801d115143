use crate::Frame;

/// Frame under construction plus the mask of pixels painted by sprites.
pub(crate) struct Canvas {
    pub frame: Frame,
    pub mask: Vec<bool>,
}

impl Canvas {
    pub fn new(background: Frame) -> Self {
        let n = background.size * background.size;
        Self { frame: background, mask: vec![false; n] }
    }

    fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let size = self.frame.size;
        let plane = size * size;
        let i = y * size + x;
        self.frame.data[i] = rgb[0];
        self.frame.data[plane + i] = rgb[1];
        self.frame.data[2 * plane + i] = rgb[2];
        self.mask[i] = true;
    }

    /// Disc in unit coordinates: `[0, 1]²` spans the frame, radius in the same unit.
    pub fn disc(&mut self, cx: f32, cy: f32, radius: f32, rgb: [u8; 3]) {
        let size = self.frame.size as f32;
        let (px, py, pr) = (cx * size, cy * size, radius * size);
        let x0 = (px - pr).floor().max(0.0) as usize;
        let x1 = ((px + pr).ceil() as usize).min(self.frame.size);
        let y0 = (py - pr).floor().max(0.0) as usize;
        let y1 = ((py + pr).ceil() as usize).min(self.frame.size);
        for y in y0..y1 {
            for x in x0..x1 {
                let dx = x as f32 + 0.5 - px;
                let dy = y as f32 + 0.5 - py;
                if dx * dx + dy * dy <= pr * pr {
                    self.put(x, y, rgb);
                }
            }
        }
    }

    /// Axis-aligned rectangle in unit coordinates, half-open on the far edges.
    pub fn rect(&mut self, x0: f32, y0: f32, x1: f32, y1: f32, rgb: [u8; 3]) {
        let size = self.frame.size as f32;
        let to_px = |v: f32| ((v * size).round().max(0.0) as usize).min(self.frame.size);
        let (ax, bx, ay, by) = (to_px(x0), to_px(x1), to_px(y0), to_px(y1));
        for y in ay..by {
            for x in ax..bx {
                self.put(x, y, rgb);
            }
        }
    }
}
