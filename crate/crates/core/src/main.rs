fn main() {
    std::process::exit(likefilter::cli::main_with_args(std::env::args_os()));
}
