fn main() {
    std::process::exit(speechpref::cli::main_with_args(std::env::args_os()));
}
