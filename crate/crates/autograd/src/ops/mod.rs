mod conv;
mod elementwise;
mod shape;
