use macp::comms::encode_message;
use macp::geom::{DenseGrid, Pose2D};
fn main() {
    let grid = DenseGrid::from_data(2, 2, 1, vec![1.5, -0.25, 0.0, 3.0]);
    let bytes = encode_message(&grid, 7, Pose2D::new(1.5, -2.0, 0.5), 16).unwrap();
    let hex: String = bytes.iter().map(|b| format!("{b:02x}")).collect();
    println!("{hex}");
    println!("len {}", bytes.len());
}
