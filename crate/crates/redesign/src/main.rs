fn main() {
    std::process::exit(redesign::run(std::env::args_os()));
}
