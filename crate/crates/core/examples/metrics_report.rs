//! The evaluation metrics on hand-made predictions.

use mtdnn::metrics::{accuracy, f1_binary, matthews_corr, pearson, spearman};

fn main() -> mtdnn::Result<()> {
    let pred = [1, 0, 1, 1, 0, 0, 1, 0];
    let gold = [1, 0, 0, 1, 0, 1, 1, 0];
    println!("accuracy {:.4}", accuracy(&pred, &gold)?);
    println!("f1       {:.4}", f1_binary(&pred, &gold, 1)?);
    println!("mcc      {:.4}", matthews_corr(&pred, &gold)?);

    let scores = [0.1, 2.3, 1.9, 4.0, 3.2];
    let gold_scores = [0.0, 2.0, 2.0, 5.0, 3.0];
    println!("pearson  {:.4}", pearson(&scores, &gold_scores)?);
    println!("spearman {:.4}", spearman(&scores, &gold_scores)?);
    Ok(())
}
