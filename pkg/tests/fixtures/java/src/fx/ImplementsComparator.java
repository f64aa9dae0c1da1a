package fx;

public abstract class ImplementsComparator implements java.util.Comparator {}
