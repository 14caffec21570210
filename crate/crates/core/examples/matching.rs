// Set-prediction pieces: GIoU between boxes and the one-to-one assignment
// of predictions to ground truth.

use efh::training::boxes::giou;
use efh::training::matching::hungarian;

pub fn run_example() -> efh::Result<()> {
    let a = [0.5, 0.5, 0.4, 0.4];
    let b = [0.6, 0.55, 0.4, 0.3];
    let far = [0.1, 0.1, 0.1, 0.1];
    println!("giou(a, b) = {:.4}", giou(&a, &b)?);
    println!("giou(a, far) = {:.4}", giou(&a, &far)?);

    // Two ground-truth rows, three predictions.
    let cost = [4.0, 1.0, 3.0, 2.0, 0.5, 5.0];
    let assignment = hungarian(&cost, 2, 3)?;
    println!("assignment: {assignment:?}");
    assert_eq!(assignment, vec![1, 0]);
    Ok(())
}

fn main() -> efh::Result<()> {
    run_example()
}
