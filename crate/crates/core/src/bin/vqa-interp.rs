fn main() {
    std::process::exit(vqa_interp::cli::run(std::env::args()));
}
