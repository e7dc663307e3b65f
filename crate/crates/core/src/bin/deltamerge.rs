fn main() {
    deltamerge::cli::main()
}
