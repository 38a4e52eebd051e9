mod conv;
mod elementwise;
mod layout;
mod matmul;
mod spatial;
