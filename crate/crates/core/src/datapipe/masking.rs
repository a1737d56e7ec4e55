use super::FaceBox;
use crate::frame::ImageFrame;

/// Sets every pixel outside `face_box` to black; pixels inside are untouched.
pub fn mask_face(frame: &ImageFrame, face_box: &FaceBox) -> ImageFrame {
    let (h, w) = (frame.height(), frame.width());
    let mut out = ImageFrame::zeros(h, w);
    let x1 = (face_box.x + face_box.w).min(w);
    let y1 = (face_box.y + face_box.h).min(h);
    let x0 = face_box.x.min(x1);
    for c in 0..3 {
        let src = frame.channel(c);
        let dst = out.channel_mut(c);
        for y in face_box.y.min(y1)..y1 {
            dst[y * w + x0..y * w + x1].copy_from_slice(&src[y * w + x0..y * w + x1]);
        }
    }
    out
}
